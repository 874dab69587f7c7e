//! Retrieval-grounded persona generation and the set-level diversity gate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::clustering::{ClusterError, ClusterModel};
use crate::completion::{ChatMessage, CompletionProvider, CompletionRequest, Task};
use crate::embedding::{cosine_similarity, Embedder, Embedding, EmbeddingError};
use crate::index::{IndexError, MetadataFilter, QueryHit, VectorIndex};
use crate::provider::ProviderError;

pub const DEFAULT_CONTEXT_SIZE: usize = 20;
pub const DEFAULT_RQE_THRESHOLD: f64 = 0.6;
pub const DEFAULT_MAX_ROUNDS: usize = 3;
pub const MIN_ATTRIBUTES: usize = 8;
pub const MAX_ATTRIBUTES: usize = 20;
pub const MAX_DEMOGRAPHIC_NOTES: usize = 4;

const CORE_SYSTEM: &str = include_str!("../prompts/persona_core_v1.txt");
const CORE_USER: &str = include_str!("../prompts/persona_core_user_v1.txt");
const DEMOGRAPHICS_SYSTEM: &str = include_str!("../prompts/persona_demographics_v1.txt");
const DEMOGRAPHICS_USER: &str = include_str!("../prompts/persona_demographics_user_v1.txt");

#[derive(Debug, thiserror::Error)]
pub enum PersonaError {
    #[error("completion provider failed: {0}")]
    Provider(#[from] ProviderError),
    #[error("{stage} reply violates the schema ({detail}); missing or invalid fields: {}", fields.join(", "))]
    SchemaViolation {
        stage: &'static str,
        fields: Vec<String>,
        detail: String,
    },
    #[error("persona has {0} attributes, expected {MIN_ATTRIBUTES}..={MAX_ATTRIBUTES}")]
    AttributeCount(usize),
    #[error("persona name is empty")]
    EmptyName,
    #[error("attribute text is empty ({0})")]
    EmptyAttribute(String),
    #[error("duplicate attribute text: {0:?}")]
    DuplicateAttribute(String),
    #[error("profile_text does not match the persona fields")]
    ProfileMismatch,
    #[error("cluster {0} has no indexed entries")]
    UnknownCluster(usize),
    #[error("no retrieved context for cluster {0}")]
    EmptyContext(usize),
    #[error("need at least 2 personas, got {0}")]
    TooFewPersonas(usize),
    #[error("weights must be non-negative, one per vector, and sum to 1")]
    InvalidWeights,
    #[error("similarity matrix must be square")]
    NotSquare,
    #[error("diversity threshold {threshold} not met after {rounds} rounds (rqe {rqe:.4})", threshold = .0.threshold, rounds = .0.iterations, rqe = .0.rqe)]
    DiversityUnmet(Box<DiversityReport>),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeCategory {
    Demographic,
    Behavior,
    Goal,
    Frustration,
    PostingStyle,
}

impl AttributeCategory {
    pub const ALL: [Self; 5] = [
        Self::Demographic,
        Self::Behavior,
        Self::Goal,
        Self::Frustration,
        Self::PostingStyle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Demographic => "demographic",
            Self::Behavior => "behavior",
            Self::Goal => "goal",
            Self::Frustration => "frustration",
            Self::PostingStyle => "posting_style",
        }
    }

    fn heading(self) -> &'static str {
        match self {
            Self::Demographic => "Demographic notes",
            Self::Behavior => "Behaviors",
            Self::Goal => "Goals",
            Self::Frustration => "Frustrations",
            Self::PostingStyle => "Posting style",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaAttribute {
    pub attr_id: String,
    pub category: AttributeCategory,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: u32,
    pub gender: String,
    pub location: String,
    pub occupation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    pub source_cluster_id: usize,
    pub demographics: Demographics,
    pub attributes: Vec<PersonaAttribute>,
    pub profile_text: String,
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Persona {
    /// Builds a persona from category-tagged attribute texts. Attributes are
    /// reordered by category, given ids like `c2-behavior-1`, and the profile
    /// text is rendered from the result.
    pub fn new(
        name: &str,
        source_cluster_id: usize,
        demographics: Demographics,
        attributes: Vec<(AttributeCategory, String)>,
    ) -> Result<Self, PersonaError> {
        let mut attributes: Vec<(AttributeCategory, String)> =
            attributes.into_iter().map(|(c, t)| (c, single_line(&t))).collect();
        attributes.sort_by_key(|(c, _)| *c);
        let mut counters: BTreeMap<AttributeCategory, usize> = BTreeMap::new();
        let attributes = attributes
            .into_iter()
            .map(|(category, text)| {
                let n = counters.entry(category).or_insert(0);
                *n += 1;
                PersonaAttribute {
                    attr_id: format!("c{source_cluster_id}-{}-{n}", category.as_str()),
                    category,
                    text,
                }
            })
            .collect();
        let mut persona = Self {
            name: single_line(name),
            source_cluster_id,
            demographics: Demographics {
                age: demographics.age,
                gender: single_line(&demographics.gender),
                location: single_line(&demographics.location),
                occupation: single_line(&demographics.occupation),
            },
            attributes,
            profile_text: String::new(),
        };
        persona.profile_text = persona.render_profile();
        persona.validate()?;
        Ok(persona)
    }

    /// Canonical profile: header fields, then one bulleted section per
    /// category in the fixed order demographic, behavior, goal, frustration,
    /// posting style. Empty sections are omitted.
    pub fn render_profile(&self) -> String {
        let d = &self.demographics;
        let mut out = format!(
            "Name: {}\nAge: {}\nGender: {}\nLocation: {}\nOccupation: {}\n",
            self.name, d.age, d.gender, d.location, d.occupation
        );
        for category in AttributeCategory::ALL {
            let texts: Vec<&str> = self
                .attributes
                .iter()
                .filter(|a| a.category == category)
                .map(|a| a.text.as_str())
                .collect();
            if texts.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{}:", category.heading());
            for t in texts {
                let _ = writeln!(out, "- {t}");
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), PersonaError> {
        if self.name.trim().is_empty() {
            return Err(PersonaError::EmptyName);
        }
        let n = self.attributes.len();
        if !(MIN_ATTRIBUTES..=MAX_ATTRIBUTES).contains(&n) {
            return Err(PersonaError::AttributeCount(n));
        }
        let mut seen = BTreeSet::new();
        for a in &self.attributes {
            if a.text.trim().is_empty() {
                return Err(PersonaError::EmptyAttribute(a.attr_id.clone()));
            }
            if !seen.insert(a.text.to_lowercase()) {
                return Err(PersonaError::DuplicateAttribute(a.text.clone()));
            }
        }
        if self.profile_text != self.render_profile() {
            return Err(PersonaError::ProfileMismatch);
        }
        Ok(())
    }

    pub fn attributes_in(&self, category: AttributeCategory) -> impl Iterator<Item = &PersonaAttribute> {
        self.attributes.iter().filter(move |a| a.category == category)
    }
}

/// Top-`m` index entries of `cluster`, ranked by cosine to the cluster's
/// unit-length centroid.
pub fn retrieve_context(
    index: &VectorIndex,
    model: &ClusterModel,
    cluster: usize,
    m: usize,
    provider_id: &str,
) -> Result<Vec<QueryHit>, PersonaError> {
    if cluster >= model.k || !index.cluster_sizes().contains_key(&cluster) {
        return Err(PersonaError::UnknownCluster(cluster));
    }
    let centroid = model.unit_centroid(cluster, provider_id)?;
    Ok(index.query(&centroid, m, Some(&MetadataFilter::cluster(cluster)))?)
}

/// A retrieved chunk together with its text, as shown to the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPassage {
    pub entry_id: String,
    pub score: f64,
    pub text: String,
}

pub(crate) fn fill(template: &str, values: &[(&str, &str)]) -> String {
    values
        .iter()
        .fold(template.to_string(), |acc, (key, value)| acc.replace(&format!("{{{key}}}"), value))
}

fn strip_fences(reply: &str) -> &str {
    let t = reply.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

#[derive(Debug)]
struct Violation {
    fields: Vec<String>,
    detail: String,
}

fn parse_object(reply: &str) -> Result<Map<String, Value>, Violation> {
    match serde_json::from_str::<Value>(strip_fences(reply)) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Violation {
            fields: vec![],
            detail: "reply is not a JSON object".into(),
        }),
        Err(e) => Err(Violation {
            fields: vec![],
            detail: format!("reply is not valid JSON: {e}"),
        }),
    }
}

fn string_list(map: &Map<String, Value>, key: &str) -> Option<Vec<String>> {
    map.get(key)?
        .as_array()?
        .iter()
        .map(|v| v.as_str().map(str::trim).filter(|s| !s.is_empty()).map(String::from))
        .collect()
}

fn non_empty_str(map: &Map<String, Value>, key: &str) -> Option<String> {
    map.get(key)?.as_str().map(str::trim).filter(|s| !s.is_empty()).map(String::from)
}

struct CoreReply {
    name: String,
    attributes: Vec<(AttributeCategory, String)>,
}

const CORE_FIELDS: [(&str, AttributeCategory); 4] = [
    ("behaviors", AttributeCategory::Behavior),
    ("goals", AttributeCategory::Goal),
    ("frustrations", AttributeCategory::Frustration),
    ("posting_style", AttributeCategory::PostingStyle),
];

fn parse_core(reply: &str) -> Result<CoreReply, Violation> {
    let map = parse_object(reply)?;
    let mut fields = Vec::new();
    let name = non_empty_str(&map, "name");
    if name.is_none() {
        fields.push("name".to_string());
    }
    let mut attributes = Vec::new();
    for (key, category) in CORE_FIELDS {
        match string_list(&map, key) {
            Some(items) => attributes.extend(items.into_iter().map(|t| (category, t))),
            None => fields.push(key.to_string()),
        }
    }
    if !fields.is_empty() {
        return Err(Violation {
            fields,
            detail: "required fields absent or not in the expected form".into(),
        });
    }
    Ok(CoreReply {
        name: name.unwrap_or_default(),
        attributes,
    })
}

fn parse_demographics(reply: &str) -> Result<(Demographics, Vec<String>), Violation> {
    let map = parse_object(reply)?;
    let mut fields = Vec::new();
    let age = map.get("age").and_then(Value::as_u64).filter(|a| (1..=120).contains(a));
    if age.is_none() {
        fields.push("age".to_string());
    }
    let mut text = |key: &str| {
        let v = non_empty_str(&map, key);
        if v.is_none() {
            fields.push(key.to_string());
        }
        v.unwrap_or_default()
    };
    let gender = text("gender");
    let location = text("location");
    let occupation = text("occupation");
    let notes = match map.get("notes") {
        None | Some(Value::Null) => Some(vec![]),
        Some(_) => string_list(&map, "notes").filter(|n| n.len() <= MAX_DEMOGRAPHIC_NOTES),
    };
    if notes.is_none() {
        fields.push("notes".to_string());
    }
    if !fields.is_empty() {
        return Err(Violation {
            fields,
            detail: "required fields absent or not in the expected form".into(),
        });
    }
    Ok((
        Demographics {
            age: age.unwrap_or_default() as u32,
            gender,
            location,
            occupation,
        },
        notes.unwrap_or_default(),
    ))
}

/// Two-stage generator: stage one derives the name and the behavioral
/// attributes from retrieved context, stage two assigns demographics.
/// Each stage gets one corrective re-prompt on a schema violation.
pub struct PersonaGenerator<'a> {
    provider: &'a dyn CompletionProvider,
    temperature: f64,
}

impl<'a> PersonaGenerator<'a> {
    pub fn new(provider: &'a dyn CompletionProvider, temperature: f64) -> Self {
        Self { provider, temperature }
    }

    fn ask<T>(
        &self,
        stage: &'static str,
        mut request: CompletionRequest,
        parse: impl Fn(&str) -> Result<T, Violation>,
    ) -> Result<T, PersonaError> {
        let reply = self.provider.complete(&request)?;
        let violation = match parse(&reply) {
            Ok(v) => return Ok(v),
            Err(v) => v,
        };
        tracing::warn!(stage, detail = %violation.detail, "re-prompting after schema violation");
        request.messages.push(ChatMessage::assistant(reply));
        request.messages.push(ChatMessage::user(format!(
            "That reply could not be used ({}; fields: {}). Reply again with the JSON object only.",
            violation.detail,
            violation.fields.join(", ")
        )));
        let retry = self.provider.complete(&request)?;
        parse(&retry).map_err(|v| PersonaError::SchemaViolation {
            stage,
            fields: v.fields,
            detail: v.detail,
        })
    }

    /// `revisions` are directives from earlier diversity-gate rounds; they
    /// are appended to the prompt in order.
    pub fn generate(
        &self,
        cluster_id: usize,
        context: &[ContextPassage],
        revisions: &[String],
    ) -> Result<Persona, PersonaError> {
        if context.is_empty() {
            return Err(PersonaError::EmptyContext(cluster_id));
        }
        let passages: String = context
            .iter()
            .enumerate()
            .map(|(i, p)| format!("[{}] {}\n", i + 1, single_line(&p.text)))
            .collect();
        let revision_block: String = revisions.iter().map(|r| format!("\n{r}\n")).collect();
        let core_request = CompletionRequest::new(
            Task::PersonaCore,
            vec![
                ChatMessage::system(CORE_SYSTEM.trim_end()),
                ChatMessage::user(fill(
                    CORE_USER,
                    &[
                        ("cluster_id", &cluster_id.to_string()),
                        ("context", passages.trim_end()),
                        ("revisions", &revision_block),
                    ],
                )),
            ],
            self.temperature,
        )
        .tag("cluster_id", cluster_id)
        .tag("revision_round", revisions.len());

        let core = self.ask("persona", core_request, |reply| {
            let core = parse_core(reply)?;
            let n = core.attributes.len();
            if n + MAX_DEMOGRAPHIC_NOTES < MIN_ATTRIBUTES || n > MAX_ATTRIBUTES {
                return Err(Violation {
                    fields: CORE_FIELDS.iter().map(|(k, _)| k.to_string()).collect(),
                    detail: format!("{n} attribute sentences, expected {MIN_ATTRIBUTES}..={MAX_ATTRIBUTES}"),
                });
            }
            Ok(core)
        })?;

        let attribute_lines: String = core
            .attributes
            .iter()
            .map(|(c, t)| format!("- ({}) {}\n", c.as_str(), single_line(t)))
            .collect();
        let demo_request = CompletionRequest::new(
            Task::PersonaDemographics,
            vec![
                ChatMessage::system(DEMOGRAPHICS_SYSTEM.trim_end()),
                ChatMessage::user(fill(
                    DEMOGRAPHICS_USER,
                    &[("name", &core.name), ("attributes", attribute_lines.trim_end())],
                )),
            ],
            self.temperature,
        )
        .tag("cluster_id", cluster_id)
        .tag("persona", &core.name);
        let room = MAX_ATTRIBUTES - core.attributes.len();
        let (demographics, notes) = self.ask("demographics", demo_request, |reply| {
            let (d, notes) = parse_demographics(reply)?;
            if notes.len() > room {
                return Err(Violation {
                    fields: vec!["notes".into()],
                    detail: format!("at most {room} notes fit the attribute bound"),
                });
            }
            Ok((d, notes))
        })?;

        let mut attributes = core.attributes;
        attributes.extend(notes.into_iter().map(|n| (AttributeCategory::Demographic, n)));
        Persona::new(&core.name, cluster_id, demographics, attributes)
    }

    /// Generates one persona per `(cluster, context)` pair, concurrently.
    /// A name already taken by an earlier cluster gets a `(cluster N)` suffix.
    pub fn generate_all(
        &self,
        contexts: &BTreeMap<usize, Vec<ContextPassage>>,
        revisions: &[String],
    ) -> Result<Vec<Persona>, PersonaError> {
        let jobs: Vec<(&usize, &Vec<ContextPassage>)> = contexts.iter().collect();
        let personas: Vec<Persona> = jobs
            .par_iter()
            .map(|(cluster, context)| self.generate(**cluster, context, revisions))
            .collect::<Result<_, _>>()?;
        dedupe_names(personas)
    }
}

fn dedupe_names(personas: Vec<Persona>) -> Result<Vec<Persona>, PersonaError> {
    let mut taken = BTreeSet::new();
    personas
        .into_iter()
        .map(|mut p| {
            if !taken.insert(p.name.clone()) {
                p.name = format!("{} (cluster {})", p.name, p.source_cluster_id);
                taken.insert(p.name.clone());
                p.profile_text = p.render_profile();
            }
            Ok(p)
        })
        .collect()
}

fn check_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>, PersonaError> {
    match weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) => {
            let sum: f64 = w.iter().sum();
            if w.len() != n || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(PersonaError::InvalidWeights);
            }
            Ok(w.to_vec())
        }
    }
}

/// Rao's quadratic entropy over a cosine-similarity matrix, with
/// `d = clamp(1 - cos, 0, 1)`, rescaled by `1 - 1/n` so that uniform weights
/// give the mean off-diagonal distance.
pub fn rqe_from_similarity(similarity: &[Vec<f64>], weights: Option<&[f64]>) -> Result<f64, PersonaError> {
    let n = similarity.len();
    if n < 2 {
        return Err(PersonaError::TooFewPersonas(n));
    }
    if similarity.iter().any(|row| row.len() != n) {
        return Err(PersonaError::NotSquare);
    }
    let p = check_weights(n, weights)?;
    let mut raw = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                raw += p[i] * p[j] * (1.0 - similarity[i][j]).clamp(0.0, 1.0);
            }
        }
    }
    Ok((raw / (1.0 - 1.0 / n as f64)).clamp(0.0, 1.0))
}

pub fn rqe(vectors: &[Embedding], weights: Option<&[f64]>) -> Result<f64, PersonaError> {
    rqe_from_similarity(&similarity_matrix(vectors)?, weights)
}

pub fn similarity_matrix(vectors: &[Embedding]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    let n = vectors.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine_similarity(&vectors[i], &vectors[j])?;
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub threshold: f64,
    pub max_rounds: usize,
    /// How many of the most similar pairs a revision directive names.
    pub pairs_per_directive: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_RQE_THRESHOLD,
            max_rounds: DEFAULT_MAX_ROUNDS,
            pairs_per_directive: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRound {
    pub round: usize,
    pub names: Vec<String>,
    pub rqe: f64,
    pub pairwise_cs: Vec<Vec<f64>>,
    /// Directive appended to the prompts after this round, if it failed.
    pub directive: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub names: Vec<String>,
    pub rqe: f64,
    pub pairwise_cs: Vec<Vec<f64>>,
    /// Number of evaluated rounds, the first being the initial set.
    pub iterations: usize,
    pub accepted: bool,
    pub threshold: f64,
    pub rounds: Vec<GateRound>,
}

struct Evaluation {
    rqe: f64,
    matrix: Vec<Vec<f64>>,
}

fn evaluate(personas: &[Persona], embedder: &dyn Embedder) -> Result<Evaluation, PersonaError> {
    let texts: Vec<&str> = personas.iter().map(|p| p.profile_text.as_str()).collect();
    let vectors = embedder.embed(&texts)?;
    let matrix = similarity_matrix(&vectors)?;
    Ok(Evaluation {
        rqe: rqe_from_similarity(&matrix, None)?,
        matrix,
    })
}

fn directive(
    round: usize,
    personas: &[Persona],
    matrix: &[Vec<f64>],
    embedder: &dyn Embedder,
    pairs: usize,
) -> Result<String, PersonaError> {
    let n = personas.len();
    let mut ranked: Vec<(f64, usize, usize)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| (matrix[i][j], i, j)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut text = format!(
        "Revision {round}: the persona set is not diverse enough. Make this persona's attributes specific to its own cluster and avoid the overlaps below."
    );
    for &(cs, i, j) in ranked.iter().take(pairs.max(1)) {
        let (a, b) = (&personas[i], &personas[j]);
        let ta: Vec<&str> = a.attributes.iter().map(|x| x.text.as_str()).collect();
        let tb: Vec<&str> = b.attributes.iter().map(|x| x.text.as_str()).collect();
        let va = embedder.embed(&ta)?;
        let vb = embedder.embed(&tb)?;
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (x, u) in va.iter().enumerate() {
            for (y, v) in vb.iter().enumerate() {
                let c = cosine_similarity(u, v)?;
                if c > best.0 {
                    best = (c, x, y);
                }
            }
        }
        let _ = write!(
            text,
            "\n- \"{}\" and \"{}\" are too similar (cosine {cs:.2}); overlapping attributes: \"{}\" / \"{}\".",
            a.name, b.name, ta[best.1], tb[best.2]
        );
    }
    Ok(text)
}

/// Embeds each profile, scores the set by RQE and, while below the threshold,
/// regenerates every persona with an accumulated revision directive. Returns
/// the accepted set, or `DiversityUnmet` with the full report after
/// `max_rounds` evaluated rounds.
pub fn diversity_gate(
    initial: Vec<Persona>,
    contexts: &BTreeMap<usize, Vec<ContextPassage>>,
    generator: &PersonaGenerator<'_>,
    embedder: &dyn Embedder,
    config: &GateConfig,
) -> Result<(Vec<Persona>, DiversityReport), PersonaError> {
    if initial.len() < 2 {
        return Err(PersonaError::TooFewPersonas(initial.len()));
    }
    let mut personas = initial;
    let mut directives: Vec<String> = Vec::new();
    let mut rounds = Vec::new();
    loop {
        let round = rounds.len() + 1;
        let eval = evaluate(&personas, embedder)?;
        let accepted = eval.rqe >= config.threshold;
        let last = round >= config.max_rounds.max(1);
        let next = if accepted || last {
            None
        } else {
            Some(directive(round, &personas, &eval.matrix, embedder, config.pairs_per_directive)?)
        };
        tracing::info!(round, rqe = eval.rqe, accepted, "diversity gate round");
        rounds.push(GateRound {
            round,
            names: personas.iter().map(|p| p.name.clone()).collect(),
            rqe: eval.rqe,
            pairwise_cs: eval.matrix.clone(),
            directive: next.clone(),
        });
        if accepted || last {
            let report = DiversityReport {
                names: personas.iter().map(|p| p.name.clone()).collect(),
                rqe: eval.rqe,
                pairwise_cs: eval.matrix,
                iterations: round,
                accepted,
                threshold: config.threshold,
                rounds,
            };
            return if accepted {
                Ok((personas, report))
            } else {
                Err(PersonaError::DiversityUnmet(Box::new(report)))
            };
        }
        directives.extend(next);
        let wanted: BTreeMap<usize, Vec<ContextPassage>> = personas
            .iter()
            .map(|p| (p.source_cluster_id, contexts.get(&p.source_cluster_id).cloned().unwrap_or_default()))
            .collect();
        personas = generator.generate_all(&wanted, &directives)?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completion::{ScriptedCompletion, StubCompletion};
    use crate::embedding::HashEmbedder;
    use proptest::prelude::*;
    use serde_json::json;

    fn demographics() -> Demographics {
        Demographics {
            age: 30,
            gender: "female".into(),
            location: "Oslo".into(),
            occupation: "analyst".into(),
        }
    }

    fn core_payload(prefix: &str) -> String {
        let s = |k: &str, n: usize| (1..=n).map(|i| format!("{prefix} {k} sentence {i}.")).collect::<Vec<_>>();
        json!({
            "name": format!("{prefix} Archetype"),
            "behaviors": s("behavior", 3),
            "goals": s("goal", 2),
            "frustrations": s("frustration", 2),
            "posting_style": s("style", 2),
        })
        .to_string()
    }

    fn demo_payload() -> String {
        json!({"age": 41, "gender": "male", "location": "Lyon", "occupation": "trader", "notes": ["Works nights."]}).to_string()
    }

    fn context() -> Vec<ContextPassage> {
        vec![ContextPassage {
            entry_id: "p1#0".into(),
            score: 0.9,
            text: "some retrieved text".into(),
        }]
    }

    #[test]
    fn fixed_payload_becomes_persona() {
        let provider = ScriptedCompletion::new([core_payload("Alpha"), format!("```json\n{}\n```", demo_payload())]);
        let p = PersonaGenerator::new(&provider, 0.7).generate(4, &context(), &[]).unwrap();
        assert_eq!(p.name, "Alpha Archetype");
        assert_eq!(p.source_cluster_id, 4);
        assert_eq!(p.attributes.len(), 10);
        assert_eq!(p.attributes[0].attr_id, "c4-demographic-1");
        assert_eq!(p.attributes[0].text, "Works nights.");
        assert_eq!(p.demographics.occupation, "trader");
        assert!(p.profile_text.starts_with("Name: Alpha Archetype\nAge: 41\n"));
        p.validate().unwrap();
    }

    #[test]
    fn malformed_twice_names_missing_fields() {
        let provider = ScriptedCompletion::new([r#"{"name": "X"}"#, r#"{"name": "X", "goals": []}"#]);
        let err = PersonaGenerator::new(&provider, 0.7).generate(0, &context(), &[]).unwrap_err();
        match err {
            PersonaError::SchemaViolation { fields, .. } => {
                assert_eq!(fields, vec!["behaviors", "frustrations", "posting_style"]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let requests = provider.requests();
        assert_eq!(requests.len(), 2);
        assert_eq!(requests[1].messages.len(), 4);
    }

    #[test]
    fn one_retry_recovers() {
        let provider = ScriptedCompletion::new(["not json".to_string(), core_payload("B"), demo_payload()]);
        let p = PersonaGenerator::new(&provider, 0.7).generate(1, &context(), &[]).unwrap();
        assert_eq!(p.name, "B Archetype");
    }

    #[test]
    fn stub_generation_is_reproducible() {
        let ctx: Vec<ContextPassage> = (0..8)
            .map(|i| ContextPassage {
                entry_id: format!("p{i}#0"),
                score: 1.0,
                text: format!("Leverage traders watch volatility number {i} daily. Market swings reward the bold one {i}."),
            })
            .collect();
        let stub = StubCompletion::new(9);
        let g = PersonaGenerator::new(&stub, 0.7);
        let a = g.generate(2, &ctx, &[]).unwrap();
        let b = g.generate(2, &ctx, &[]).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let revised = g.generate(2, &ctx, &["Revision 1".into()]).unwrap();
        assert_ne!(a.attributes, revised.attributes);
    }

    #[test]
    fn attribute_bounds() {
        let few: Vec<_> = (0..7).map(|i| (AttributeCategory::Goal, format!("goal {i}"))).collect();
        assert!(matches!(Persona::new("N", 0, demographics(), few), Err(PersonaError::AttributeCount(7))));
        let dup: Vec<_> = (0..9).map(|i| (AttributeCategory::Goal, format!("goal {}", i.min(7)))).collect();
        assert!(matches!(Persona::new("N", 0, demographics(), dup), Err(PersonaError::DuplicateAttribute(_))));
    }

    #[test]
    fn rqe_reference_values() {
        let e = |v: &[f64]| Embedding::normalized(v.to_vec(), "t").unwrap();
        assert_eq!(rqe(&[e(&[1.0, 0.0]), e(&[1.0, 0.0]), e(&[1.0, 0.0])], None).unwrap(), 0.0);
        assert!((rqe(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])], None).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(rqe(&[e(&[1.0])], None), Err(PersonaError::TooFewPersonas(1))));
        assert!(matches!(
            rqe(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])], Some(&[0.3, 0.3])),
            Err(PersonaError::InvalidWeights)
        ));
    }

    fn orthogonal_persona(cluster: usize, word: &str) -> Persona {
        let attrs = (0..8).map(|i| (AttributeCategory::Behavior, format!("{word} {word} {i}"))).collect();
        Persona::new(word, cluster, demographics(), attrs).unwrap()
    }

    #[test]
    fn gate_accepts_distinct_set_in_first_round() {
        let embedder = HashEmbedder::new(384, 0).unwrap();
        let stub = StubCompletion::new(0);
        let g = PersonaGenerator::new(&stub, 0.7);
        let personas = vec![orthogonal_persona(0, "alpha"), orthogonal_persona(1, "omega")];
        let (kept, report) = diversity_gate(personas, &BTreeMap::new(), &g, &embedder, &GateConfig::default()).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(report.accepted);
        assert_eq!(report.iterations, 1);
        assert!((report.rqe - rqe_from_similarity(&report.pairwise_cs, None).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn gate_fails_when_revisions_change_nothing() {
        let embedder = HashEmbedder::new(64, 0).unwrap();
        let fixed = crate::completion::FnCompletion::new(|req| {
            Ok(match req.task {
                Task::PersonaCore => core_payload("Same"),
                _ => demo_payload(),
            })
        });
        let g = PersonaGenerator::new(&fixed, 0.7);
        let contexts: BTreeMap<usize, Vec<ContextPassage>> = [(0, context()), (1, context())].into();
        let initial = g.generate_all(&contexts, &[]).unwrap();
        assert_eq!(initial[1].name, "Same Archetype (cluster 1)");
        let err = diversity_gate(initial, &contexts, &g, &embedder, &GateConfig::default()).unwrap_err();
        let PersonaError::DiversityUnmet(report) = err else { panic!() };
        assert!(!report.accepted);
        assert_eq!(report.iterations, 3);
        assert_eq!(report.rounds.len(), 3);
        assert!(report.rqe < 0.05);
        assert!(report.rounds[0].directive.as_ref().unwrap().contains("overlapping attributes"));
        assert!(report.rounds[2].directive.is_none());
    }

    proptest! {
        #[test]
        fn profile_contains_each_attribute_once(texts in proptest::collection::btree_set("[a-z]{3,12}( [a-z]{2,8}){0,4}", 8..20)) {
            let attrs: Vec<_> = texts.iter().enumerate()
                .map(|(i, t)| (AttributeCategory::ALL[i % 5], t.clone()))
                .collect();
            let p = Persona::new("Probe", 0, demographics(), attrs).unwrap();
            for a in &p.attributes {
                let line = format!("- {}", a.text);
                prop_assert_eq!(p.profile_text.lines().filter(|l| *l == line).count(), 1);
            }
        }

        #[test]
        fn rqe_permutation_invariant_and_bounded(raw in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 2..6), shift in 0usize..5) {
            let vectors: Vec<Embedding> = raw.iter()
                .map(|v| { let mut v = v.clone(); v[0] += 0.1; Embedding::normalized(v, "t").unwrap() })
                .collect();
            let r = rqe(&vectors, None).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            let mut rotated = vectors.clone();
            let len = rotated.len();
            rotated.rotate_left(shift % len);
            prop_assert!((rqe(&rotated, None).unwrap() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn rqe_grows_when_duplicate_replaced_by_orthogonal() {
        for n in 2..=6 {
            let mut e0 = vec![0.0; 8];
            e0[0] = 1.0;
            let base = Embedding::normalized(e0, "t").unwrap();
            let mut set = vec![base.clone(); n];
            let before = rqe(&set, None).unwrap();
            assert_eq!(before, 0.0);
            let mut v = vec![0.0; 8];
            v[n] = 1.0;
            set[n - 1] = Embedding::normalized(v, "t").unwrap();
            assert!(rqe(&set, None).unwrap() > before);
        }
    }
}
