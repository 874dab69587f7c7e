//! Transcript analyses: rolling-window similarity, divergence of
//! concatenated responses, and nearest-profile attribution of messages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, Embedder, EmbeddingError};
use crate::grounding::off_diagonal_mean;
use crate::persona::{similarity_matrix, Persona};
use crate::simulation::{Message, Transcript};
use crate::stats::{binomial_test, clopper_pearson_lower, softmax, Alternative, BinomialTestResult, StatsError};

pub const DEFAULT_WINDOW: usize = 2;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_DIVERGENCE_TURNS: [usize; 3] = [6, 7, 9];
pub const CI_CONFIDENCE: f64 = 0.95;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("window must be at least 1")]
    InvalidWindow,
    #[error("transcript has {have} turns, window needs {need}")]
    TooFewTurns { have: usize, need: usize },
    #[error("turn {0} is not in the transcript")]
    MissingTurn(usize),
    #[error("need at least 2 personas, found {0}")]
    TooFewPersonas(usize),
    #[error("transcript has no agent messages")]
    EmptyTranscript,
    #[error("message {index} is by {author:?}, who is not among the personas")]
    UnknownAuthor { index: usize, author: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn last_turn(transcript: &Transcript) -> usize {
    transcript.messages.iter().map(|m| m.turn).max().unwrap_or(0)
}

fn spoken(transcript: &Transcript) -> Vec<&Message> {
    transcript.agent_messages().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub turn: usize,
    pub value: f64,
    pub messages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySeries {
    pub window: usize,
    pub points: Vec<SeriesPoint>,
    /// Turn of the highest point (earliest on ties).
    pub argmax: Option<usize>,
    pub argmin: Option<usize>,
}

impl SimilaritySeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("turn,value\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.turn, p.value);
        }
        out
    }
}

/// For each turn `t >= window`, the mean cosine over all unordered pairs of
/// agent messages from turns `t - window + 1 ..= t`. Windows with fewer than
/// two messages are skipped.
pub fn rolling_similarity(
    transcript: &Transcript,
    embedder: &dyn Embedder,
    window: usize,
) -> Result<SimilaritySeries, AnalysisError> {
    if window == 0 {
        return Err(AnalysisError::InvalidWindow);
    }
    let turns = last_turn(transcript);
    if turns < window {
        return Err(AnalysisError::TooFewTurns { have: turns, need: window });
    }
    let messages = spoken(transcript);
    let texts: Vec<&str> = messages.iter().map(|m| m.text.as_str()).collect();
    let vectors = if texts.is_empty() { vec![] } else { embedder.embed(&texts)? };

    let mut points = Vec::new();
    for t in window..=turns {
        let inside: Vec<usize> = (0..messages.len())
            .filter(|&i| messages[i].turn + window > t && messages[i].turn <= t)
            .collect();
        if inside.len() < 2 {
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in inside.iter().enumerate() {
            for &j in &inside[a + 1..] {
                sum += cosine_similarity(&vectors[i], &vectors[j])?;
                pairs += 1;
            }
        }
        points.push(SeriesPoint {
            turn: t,
            value: sum / pairs as f64,
            messages: inside.len(),
        });
    }
    let pick = |better: fn(f64, f64) -> bool| {
        points
            .iter()
            .fold(None::<&SeriesPoint>, |best, p| match best {
                Some(b) if !better(p.value, b.value) => Some(b),
                _ => Some(p),
            })
            .map(|p| p.turn)
    };
    Ok(SimilaritySeries {
        window,
        argmax: pick(|a, b| a > b),
        argmin: pick(|a, b| a < b),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub turn_subset: Vec<usize>,
    pub personas: Vec<String>,
    /// Personas with no message in the subset, left out of the matrix.
    pub absent: Vec<String>,
    pub texts: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub pairs: usize,
}

/// Concatenates each persona's messages from `turn_subset` in transcript
/// order and compares the concatenations pairwise.
pub fn operational_divergence(
    transcript: &Transcript,
    embedder: &dyn Embedder,
    turn_subset: &[usize],
) -> Result<DivergenceReport, AnalysisError> {
    let subset: BTreeSet<usize> = turn_subset.iter().copied().collect();
    let present_turns: BTreeSet<usize> = transcript.messages.iter().map(|m| m.turn).collect();
    if let Some(&t) = subset.iter().find(|t| !present_turns.contains(t)) {
        return Err(AnalysisError::MissingTurn(t));
    }
    let mut personas = Vec::new();
    let mut absent = Vec::new();
    let mut texts = Vec::new();
    for p in &transcript.personas {
        let parts: Vec<&str> = transcript
            .agent_messages()
            .filter(|m| m.author == p.name && subset.contains(&m.turn))
            .map(|m| m.text.as_str())
            .collect();
        if parts.is_empty() {
            absent.push(p.name.clone());
        } else {
            personas.push(p.name.clone());
            texts.push(parts.join("\n"));
        }
    }
    if personas.len() < 2 {
        return Err(AnalysisError::TooFewPersonas(personas.len()));
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let matrix = similarity_matrix(&embedder.embed(&refs)?)?;
    let n = matrix.len();
    let off: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| matrix[i][j]).collect();
    Ok(DivergenceReport {
        turn_subset: subset.into_iter().collect(),
        personas,
        absent,
        texts,
        mean: off_diagonal_mean(&matrix),
        min: off.iter().copied().fold(f64::INFINITY, f64::min),
        max: off.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        pairs: off.len(),
        matrix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub index: usize,
    pub turn: usize,
    pub true_persona: String,
    pub probabilities: Vec<f64>,
    pub predicted: String,
    pub own_probability: f64,
    /// Own probability minus the largest other probability.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaAttribution {
    pub persona: String,
    pub messages: usize,
    pub accuracy: Option<f64>,
    pub mean_own_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub temperature: f64,
    pub personas: Vec<String>,
    pub rows: Vec<AttributionRow>,
    /// Row = true persona, column = mean probability assigned to each persona.
    pub confusion: Vec<Vec<f64>>,
    pub correct: usize,
    pub total: usize,
    pub top1_accuracy: f64,
    pub chance: f64,
    pub binomial: BinomialTestResult,
    /// One-sided lower confidence bound on accuracy (Clopper–Pearson).
    pub accuracy_ci_lower: f64,
    pub per_persona: Vec<PersonaAttribution>,
}

impl AttributionReport {
    pub fn render_table(&self) -> String {
        let width = self.personas.iter().map(String::len).max().unwrap_or(8).max(8);
        let mut out = format!("{:<width$}", "true \\ predicted");
        for p in &self.personas {
            let _ = write!(out, " {:>w$}", p, w = p.len().max(6));
        }
        let _ = writeln!(out, " {:>6} {:>8}", "n", "acc");
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{:<width$}", self.personas[i]);
            for (j, v) in row.iter().enumerate() {
                let _ = write!(out, " {:>w$.3}", v, w = self.personas[j].len().max(6));
            }
            let s = &self.per_persona[i];
            let acc = s.accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
            let _ = writeln!(out, " {:>6} {:>8}", s.messages, acc);
        }
        let _ = writeln!(
            out,
            "accuracy {:.3} ({}/{}), chance {:.3}, binomial p = {:.3e}, {:.0}% CI [{:.3}, 1.000]",
            self.top1_accuracy,
            self.correct,
            self.total,
            self.chance,
            self.binomial.p_value,
            CI_CONFIDENCE * 100.0,
            self.accuracy_ci_lower
        );
        out
    }
}

/// Index of the highest probability; exact ties go to the persona whose
/// name sorts first.
fn predict(probabilities: &[f64], names: &[String]) -> usize {
    let mut best = 0;
    for i in 1..probabilities.len() {
        let (p, q) = (probabilities[i], probabilities[best]);
        if p > q || (p == q && names[i] < names[best]) {
            best = i;
        }
    }
    best
}

/// Scores each agent message against every persona's profile embedding and
/// turns the cosines into probabilities with a temperature softmax.
pub fn attribute_messages(
    transcript: &Transcript,
    personas: &[Persona],
    embedder: &dyn Embedder,
    temperature: f64,
) -> Result<AttributionReport, AnalysisError> {
    if personas.len() < 2 {
        return Err(AnalysisError::TooFewPersonas(personas.len()));
    }
    let messages = spoken(transcript);
    if messages.is_empty() {
        return Err(AnalysisError::EmptyTranscript);
    }
    let names: Vec<String> = personas.iter().map(|p| p.name.clone()).collect();
    let position: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    for m in &messages {
        if !position.contains_key(m.author.as_str()) {
            return Err(AnalysisError::UnknownAuthor {
                index: m.index,
                author: m.author.clone(),
            });
        }
    }
    let profiles: Vec<&str> = personas.iter().map(|p| p.profile_text.as_str()).collect();
    let references = embedder.embed(&profiles)?;
    let texts: Vec<&str> = messages.iter().map(|m| m.text.as_str()).collect();
    let vectors = embedder.embed(&texts)?;

    let n = names.len();
    let mut confusion = vec![vec![0.0; n]; n];
    let mut counts = vec![0usize; n];
    let mut hits = vec![0usize; n];
    let mut own_sum = vec![0.0; n];
    let mut rows = Vec::with_capacity(messages.len());
    for (m, v) in messages.iter().zip(&vectors) {
        let scores = references
            .iter()
            .map(|r| cosine_similarity(v, r))
            .collect::<Result<Vec<f64>, _>>()?;
        let probabilities = softmax(&scores, temperature)?;
        let truth = position[m.author.as_str()];
        let predicted = predict(&probabilities, &names);
        let own = probabilities[truth];
        let max_other = probabilities
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != truth)
            .map(|(_, &p)| p)
            .fold(f64::NEG_INFINITY, f64::max);
        counts[truth] += 1;
        own_sum[truth] += own;
        if predicted == truth {
            hits[truth] += 1;
        }
        for (c, p) in confusion[truth].iter_mut().zip(&probabilities) {
            *c += p;
        }
        rows.push(AttributionRow {
            index: m.index,
            turn: m.turn,
            true_persona: m.author.clone(),
            predicted: names[predicted].clone(),
            own_probability: own,
            margin: own - max_other,
            probabilities,
        });
    }
    for (row, &c) in confusion.iter_mut().zip(&counts) {
        if c > 0 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    let correct: usize = hits.iter().sum();
    let total = rows.len();
    let chance = 1.0 / n as f64;
    let binomial = binomial_test(correct as u64, total as u64, chance, Alternative::Greater)?;
    let accuracy_ci_lower = clopper_pearson_lower(correct as u64, total as u64, CI_CONFIDENCE)?;
    let per_persona = (0..n)
        .map(|i| PersonaAttribution {
            persona: names[i].clone(),
            messages: counts[i],
            accuracy: (counts[i] > 0).then(|| hits[i] as f64 / counts[i] as f64),
            mean_own_probability: (counts[i] > 0).then(|| own_sum[i] / counts[i] as f64),
        })
        .collect();
    Ok(AttributionReport {
        temperature,
        personas: names,
        rows,
        confusion,
        correct,
        total,
        top1_accuracy: correct as f64 / total as f64,
        chance,
        binomial,
        accuracy_ci_lower,
        per_persona,
    })
}

/// Square matrix as CSV with a header row and a leading name column.
pub fn matrix_csv(names: &[String], matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("persona");
    for n in names {
        let _ = write!(out, ",{}", csv_field(n));
    }
    out.push('\n');
    for (n, row) in names.iter().zip(matrix) {
        out.push_str(&csv_field(n));
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedding, HashEmbedder};
    use crate::persona::{AttributeCategory, Demographics};
    use crate::simulation::{SimulationConfig, MODERATOR};

    fn persona(name: &str, words: &str) -> Persona {
        let attrs = (0..8).map(|i| (AttributeCategory::Behavior, format!("{words} {i}"))).collect();
        let demo = Demographics {
            age: 30,
            gender: "g".into(),
            location: "l".into(),
            occupation: "o".into(),
        };
        Persona::new(name, 0, demo, attrs).unwrap()
    }

    fn msg(index: usize, turn: usize, author: &str, text: &str) -> Message {
        Message {
            index,
            turn,
            author: author.into(),
            text: text.into(),
            passed: false,
        }
    }

    fn transcript(personas: Vec<Persona>, messages: Vec<Message>) -> Transcript {
        Transcript {
            session_id: "t".into(),
            config: SimulationConfig::default(),
            personas,
            messages,
        }
    }

    /// Embeds texts of the form "e<i>" as basis vector i and "e<i>+e<j>" as
    /// their normalized sum.
    struct Basis;
    impl Embedder for Basis {
        fn provider_id(&self) -> &str {
            "basis"
        }
        fn dimension(&self) -> usize {
            4
        }
        fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
            texts
                .iter()
                .map(|t| {
                    let mut v = vec![0.0; 4];
                    for part in t.split(['+', '\n']) {
                        v[part.trim_start_matches('e').parse::<usize>().unwrap()] += 1.0;
                    }
                    Embedding::normalized(v, "basis")
                })
                .collect()
        }
    }

    #[test]
    fn rolling_pair_mean_by_hand() {
        let t = transcript(
            vec![persona("A", "a"), persona("B", "b")],
            vec![msg(0, 1, "A", "e0"), msg(1, 1, "B", "e0"), msg(2, 2, "A", "e1"), msg(3, 2, "B", "e0+e1")],
        );
        let s = rolling_similarity(&t, &Basis, 2).unwrap();
        assert_eq!(s.points.len(), 1);
        // pairs: (e0,e0)=1, (e0,e1)=0 twice, (e0,e0+e1)=r twice, (e1,e0+e1)=r
        let r = 1.0 / 2f64.sqrt();
        let expected = (1.0 + 0.0 + 0.0 + 3.0 * r) / 6.0;
        assert!((s.points[0].value - expected).abs() < 1e-12);
        let s1 = rolling_similarity(&t, &Basis, 1).unwrap();
        assert_eq!(s1.points.iter().map(|p| p.turn).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(s1.argmax, Some(1));
        assert_eq!(s1.argmin, Some(2));
        assert!(matches!(rolling_similarity(&t, &Basis, 0), Err(AnalysisError::InvalidWindow)));
    }

    #[test]
    fn rolling_ignores_moderator() {
        let base = vec![msg(0, 1, "A", "e0"), msg(1, 1, "B", "e1"), msg(2, 2, "A", "e2"), msg(3, 2, "B", "e0")];
        let a = transcript(vec![persona("A", "a"), persona("B", "b")], base.clone());
        let mut with_mod = vec![msg(0, 1, MODERATOR, "e3")];
        with_mod.extend(base.into_iter().map(|mut m| {
            m.index += 1;
            m
        }));
        let b = transcript(vec![persona("A", "a"), persona("B", "b")], with_mod);
        assert_eq!(rolling_similarity(&a, &Basis, 2).unwrap(), rolling_similarity(&b, &Basis, 2).unwrap());
    }

    #[test]
    fn divergence_orthogonal_and_absent() {
        let t = transcript(
            vec![persona("A", "a"), persona("B", "b"), persona("C", "c")],
            vec![msg(0, 6, "A", "e0"), msg(1, 6, "B", "e1"), msg(2, 7, "A", "e0")],
        );
        let r = operational_divergence(&t, &Basis, &[6, 7]).unwrap();
        assert_eq!(r.personas, vec!["A", "B"]);
        assert_eq!(r.absent, vec!["C"]);
        assert_eq!(r.texts[0], "e0\ne0");
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.pairs, 1);
        assert!(matches!(operational_divergence(&t, &Basis, &[9]), Err(AnalysisError::MissingTurn(9))));
    }

    #[test]
    fn attribution_exact_profile_is_confident() {
        let e = HashEmbedder::new(384, 0).unwrap();
        let a = persona("A", "market leverage volatility");
        let b = persona("B", "meaning existence reflection");
        let t = transcript(vec![a.clone(), b.clone()], vec![msg(0, 1, "A", &a.profile_text)]);
        let r = attribute_messages(&t, &[a, b], &e, 0.1).unwrap();
        assert!(r.rows[0].own_probability > 0.99);
        assert_eq!(r.rows[0].predicted, "A");
        assert!((r.rows[0].probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_first_name() {
        let names = vec!["Zed".to_string(), "Amy".to_string()];
        assert_eq!(predict(&[0.5, 0.5], &names), 1);
        assert_eq!(predict(&[0.6, 0.4], &names), 0);
    }

    #[test]
    fn csv_layout() {
        let csv = matrix_csv(&["a".into(), "b,c".into()], &[vec![1.0, 0.5], vec![0.5, 1.0]]);
        assert_eq!(csv, "persona,a,\"b,c\"\na,1,0.5\n\"b,c\",0.5,1\n");
    }
}
