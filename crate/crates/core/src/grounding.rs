//! Reverse-query validation of persona attributes against the corpus.
//!
//! Each attribute is embedded and used as a query restricted to one cluster
//! at a time; the mean score of the top `k_retrieve` hits is that cluster's
//! similarity. An attribute is verified when its own cluster reaches the
//! grounding threshold and beats every other cluster.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, EmbeddingError};
use crate::index::{IndexError, MetadataFilter, VectorIndex};
use crate::persona::{similarity_matrix, Persona, PersonaAttribute};
use crate::stats::{cohens_d_paired, paired_t, PairedTestResult, Sidedness, StatsError};

pub const DEFAULT_K_RETRIEVE: usize = 5;
pub const DEFAULT_GROUNDING_THRESHOLD: f64 = 0.65;

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error("cluster {0} has no indexed entries")]
    EmptyCluster(usize),
    #[error("grounding needs at least one cluster besides {0}")]
    NoOtherCluster(usize),
    #[error("need at least 2 personas, got {0}")]
    TooFewPersonas(usize),
    #[error("persona {0:?} has no attributes")]
    NoAttributes(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    pub k_retrieve: usize,
    pub threshold: f64,
    pub sidedness: Sidedness,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            k_retrieve: DEFAULT_K_RETRIEVE,
            threshold: DEFAULT_GROUNDING_THRESHOLD,
            sidedness: Sidedness::Two,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeGrounding {
    pub attr_id: String,
    pub persona: String,
    pub text: String,
    pub own_cluster_id: usize,
    pub own_cs: f64,
    pub other_cs: BTreeMap<usize, f64>,
    pub mean_other_cs: f64,
    pub max_other_cs: f64,
    pub margin: f64,
    pub verified: bool,
}

impl AttributeGrounding {
    /// Recomputes the verification rule from the stored scores.
    pub fn expected_verified(&self, threshold: f64) -> bool {
        self.own_cs >= threshold && self.other_cs.values().all(|&o| self.own_cs > o)
    }
}

fn top_k_mean(
    index: &VectorIndex,
    query: &crate::embedding::Embedding,
    cluster: usize,
    k: usize,
) -> Result<f64, GroundingError> {
    let hits = index.query(query, k, Some(&MetadataFilter::cluster(cluster)))?;
    if hits.is_empty() {
        return Err(GroundingError::EmptyCluster(cluster));
    }
    Ok(hits.iter().map(|h| h.score).sum::<f64>() / hits.len() as f64)
}

pub fn ground_attribute(
    attr: &PersonaAttribute,
    persona: &str,
    own_cluster_id: usize,
    index: &VectorIndex,
    embedder: &dyn Embedder,
    config: &GroundingConfig,
) -> Result<AttributeGrounding, GroundingError> {
    let clusters: Vec<usize> = index.cluster_sizes().into_keys().collect();
    ground_with(attr, persona, own_cluster_id, &clusters, index, embedder, config)
}

fn ground_with(
    attr: &PersonaAttribute,
    persona: &str,
    own_cluster_id: usize,
    clusters: &[usize],
    index: &VectorIndex,
    embedder: &dyn Embedder,
    config: &GroundingConfig,
) -> Result<AttributeGrounding, GroundingError> {
    if !clusters.contains(&own_cluster_id) {
        return Err(GroundingError::EmptyCluster(own_cluster_id));
    }
    if clusters.len() < 2 {
        return Err(GroundingError::NoOtherCluster(own_cluster_id));
    }
    let query = embedder.embed_one(&attr.text)?;
    let own_cs = top_k_mean(index, &query, own_cluster_id, config.k_retrieve)?;
    let mut other_cs = BTreeMap::new();
    for &c in clusters.iter().filter(|&&c| c != own_cluster_id) {
        other_cs.insert(c, top_k_mean(index, &query, c, config.k_retrieve)?);
    }
    let mean_other_cs = other_cs.values().sum::<f64>() / other_cs.len() as f64;
    let max_other_cs = other_cs.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut g = AttributeGrounding {
        attr_id: attr.attr_id.clone(),
        persona: persona.to_string(),
        text: attr.text.clone(),
        own_cluster_id,
        own_cs,
        other_cs,
        mean_other_cs,
        max_other_cs,
        margin: own_cs - mean_other_cs,
        verified: false,
    };
    g.verified = g.expected_verified(config.threshold);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub persona: String,
    pub cluster_id: Option<usize>,
    pub attributes: usize,
    pub own_cs: f64,
    pub other_cs: f64,
    pub margin: f64,
    pub verified_pct: f64,
}

impl ValidationRow {
    fn from_groundings<'a>(
        persona: &str,
        cluster_id: Option<usize>,
        gs: impl Iterator<Item = &'a AttributeGrounding>,
    ) -> Self {
        let gs: Vec<&AttributeGrounding> = gs.collect();
        let n = gs.len() as f64;
        let own = gs.iter().map(|g| g.own_cs).sum::<f64>() / n;
        let other = gs.iter().map(|g| g.mean_other_cs).sum::<f64>() / n;
        Self {
            persona: persona.to_string(),
            cluster_id,
            attributes: gs.len(),
            own_cs: own,
            other_cs: other,
            margin: own - other,
            verified_pct: 100.0 * gs.iter().filter(|g| g.verified).count() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub k_retrieve: usize,
    pub threshold: f64,
    pub rows: Vec<ValidationRow>,
    pub overall: ValidationRow,
    /// Paired test on `own_cs - mean_other_cs` across all attributes.
    pub test: PairedTestResult,
    /// `None` when the differences have zero variance.
    pub cohens_d: Option<f64>,
    pub groundings: Vec<AttributeGrounding>,
}

impl CrossValidationReport {
    pub fn differences(&self) -> Vec<f64> {
        self.groundings.iter().map(|g| g.own_cs - g.mean_other_cs).collect()
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>5} {:>8} {:>8} {:>8} {:>9}",
            "Persona", "Attrs", "Own CS", "Other CS", "Margin", "Verified"
        );
        for row in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                out,
                "{:<28} {:>5} {:>8.2} {:>8.2} {:>+8.2} {:>8.0}%",
                row.persona, row.attributes, row.own_cs, row.other_cs, row.margin, row.verified_pct
            );
        }
        let t = &self.test;
        match (t.t_stat, t.p_value) {
            (Some(ts), Some(p)) => {
                let _ = write!(out, "paired t({}) = {ts:.2}, p = {p:.3e}", t.df);
                if let Some(d) = self.cohens_d {
                    let _ = write!(out, ", Cohen's d = {d:.2}");
                }
                out.push('\n');
            }
            _ => {
                let _ = writeln!(out, "paired t({}) undefined: differences have zero variance", t.df);
            }
        }
        out
    }
}

pub fn cross_validate(
    personas: &[Persona],
    index: &VectorIndex,
    embedder: &dyn Embedder,
    config: &GroundingConfig,
) -> Result<CrossValidationReport, GroundingError> {
    if personas.len() < 2 {
        return Err(GroundingError::TooFewPersonas(personas.len()));
    }
    if let Some(p) = personas.iter().find(|p| p.attributes.is_empty()) {
        return Err(GroundingError::NoAttributes(p.name.clone()));
    }
    let clusters: Vec<usize> = index.cluster_sizes().into_keys().collect();
    let jobs: Vec<(&Persona, &PersonaAttribute)> =
        personas.iter().flat_map(|p| p.attributes.iter().map(move |a| (p, a))).collect();
    let groundings: Vec<AttributeGrounding> = jobs
        .par_iter()
        .map(|(p, a)| ground_with(a, &p.name, p.source_cluster_id, &clusters, index, embedder, config))
        .collect::<Result<_, _>>()?;

    let rows = personas
        .iter()
        .map(|p| {
            ValidationRow::from_groundings(
                &p.name,
                Some(p.source_cluster_id),
                groundings.iter().filter(|g| g.persona == p.name),
            )
        })
        .collect();
    let overall = ValidationRow::from_groundings("Overall", None, groundings.iter());
    let diffs: Vec<f64> = groundings.iter().map(|g| g.own_cs - g.mean_other_cs).collect();
    let test = paired_t(&diffs, config.sidedness)?;
    let cohens_d = if test.degenerate { None } else { Some(cohens_d_paired(&diffs)?) };
    Ok(CrossValidationReport {
        k_retrieve: config.k_retrieve,
        threshold: config.threshold,
        rows,
        overall,
        test,
        cohens_d,
        groundings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterPersonaMatrix {
    pub names: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub off_diagonal_mean: f64,
}

pub fn off_diagonal_mean(matrix: &[Vec<f64>]) -> f64 {
    let n = matrix.len();
    if n < 2 {
        return f64::NAN;
    }
    let sum: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| matrix[i][j]).sum();
    sum / (n * (n - 1)) as f64
}

pub fn inter_persona_matrix(personas: &[Persona], embedder: &dyn Embedder) -> Result<InterPersonaMatrix, GroundingError> {
    if personas.len() < 2 {
        return Err(GroundingError::TooFewPersonas(personas.len()));
    }
    let texts: Vec<&str> = personas.iter().map(|p| p.profile_text.as_str()).collect();
    let matrix = similarity_matrix(&embedder.embed(&texts)?)?;
    Ok(InterPersonaMatrix {
        names: personas.iter().map(|p| p.name.clone()).collect(),
        off_diagonal_mean: off_diagonal_mean(&matrix),
        matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Embedding, HashEmbedder};
    use crate::index::{EntryMetadata, IndexEntry};
    use crate::persona::{AttributeCategory, Demographics};

    fn demo() -> Demographics {
        Demographics {
            age: 33,
            gender: "n/a".into(),
            location: "n/a".into(),
            occupation: "n/a".into(),
        }
    }

    fn attr(text: &str) -> PersonaAttribute {
        PersonaAttribute {
            attr_id: "a".into(),
            category: AttributeCategory::Behavior,
            text: text.into(),
        }
    }

    fn index_of(embedder: &HashEmbedder, chunks: &[(&str, usize)]) -> VectorIndex {
        let index = VectorIndex::new(embedder.dimension());
        let entries = chunks
            .iter()
            .enumerate()
            .map(|(i, (text, c))| IndexEntry {
                entry_id: format!("p{i}#0"),
                vector: embedder.embed_one(text).unwrap(),
                metadata: EntryMetadata::new(format!("p{i}"), 0).with_cluster(*c),
            })
            .collect();
        index.upsert(entries).unwrap();
        index
    }

    #[test]
    fn exact_match_is_verified() {
        let e = HashEmbedder::new(384, 0).unwrap();
        let index = index_of(&e, &[("market leverage volatility", 0), ("meaning existence reflection", 1)]);
        let cfg = GroundingConfig {
            k_retrieve: 1,
            ..GroundingConfig::default()
        };
        let g = ground_attribute(&attr("market leverage volatility"), "T", 0, &index, &e, &cfg).unwrap();
        assert!((g.own_cs - 1.0).abs() < 1e-12);
        assert!(g.verified);
        assert_eq!(g.verified, g.expected_verified(cfg.threshold));
    }

    #[test]
    fn other_cluster_match_fails_verification() {
        let e = HashEmbedder::new(384, 0).unwrap();
        let index = index_of(&e, &[("meaning existence reflection", 0), ("market leverage volatility", 1)]);
        let g = ground_attribute(&attr("market leverage volatility"), "T", 0, &index, &e, &GroundingConfig::default()).unwrap();
        assert!(!g.verified);
        assert!(g.max_other_cs > g.own_cs);
        assert!(matches!(
            ground_attribute(&attr("x"), "T", 7, &index, &e, &GroundingConfig::default()),
            Err(GroundingError::EmptyCluster(7))
        ));
    }

    #[test]
    fn degenerate_when_all_margins_equal() {
        let index = VectorIndex::new(2);
        let v = Embedding::normalized(vec![1.0, 0.0], "t").unwrap();
        let entries = (0..2)
            .map(|c| IndexEntry {
                entry_id: format!("e{c}"),
                vector: v.clone(),
                metadata: EntryMetadata::new(format!("p{c}"), 0).with_cluster(c),
            })
            .collect();
        index.upsert(entries).unwrap();

        struct Flat;
        impl Embedder for Flat {
            fn provider_id(&self) -> &str {
                "flat"
            }
            fn dimension(&self) -> usize {
                2
            }
            fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
                Ok(texts.iter().map(|_| Embedding::normalized(vec![1.0, 0.0], "flat").unwrap()).collect())
            }
        }
        let personas: Vec<Persona> = (0..2)
            .map(|c| {
                let attrs = (0..8).map(|i| (AttributeCategory::Goal, format!("goal {c} {i}"))).collect();
                Persona::new(&format!("P{c}"), c, demo(), attrs).unwrap()
            })
            .collect();
        let report = cross_validate(&personas, &index, &Flat, &GroundingConfig::default()).unwrap();
        assert!(report.test.degenerate);
        assert_eq!(report.test.t_stat, None);
        assert_eq!(report.cohens_d, None);
        assert_eq!(report.overall.margin, 0.0);
        assert!(report.render_table().contains("undefined"));
    }

    #[test]
    fn off_diagonal_mean_extremes() {
        let e = HashEmbedder::new(384, 0).unwrap();
        let make = |c: usize, word: &str| {
            let attrs = (0..8).map(|i| (AttributeCategory::Goal, format!("{word} {i}"))).collect();
            Persona::new("Same", c, demo(), attrs).unwrap()
        };
        let same = vec![make(0, "alpha"), make(1, "alpha")];
        let m = inter_persona_matrix(&same, &e).unwrap();
        assert!((m.off_diagonal_mean - 1.0).abs() < 1e-12);
        assert_eq!(off_diagonal_mean(&[vec![1.0, 0.0], vec![0.0, 1.0]]), 0.0);
    }
}
