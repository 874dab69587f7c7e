//! Run-directory orchestration of the full pipeline.
//!
//! Every stage reads the artifacts of earlier stages from the run directory,
//! writes its own, and records itself in `manifest.json`. Layout:
//!
//! ```text
//! manifest.json                       stage flags, artifact paths, config hash
//! config.json                         effective configuration
//! corpus/posts.jsonl                  accepted posts (archive format)
//! corpus/ingest_report.json           counts and rejections
//! corpus/clean_posts.jsonl            stop-word-filtered posts
//! corpus/chunks.jsonl                 chunks (entry id = post#seq)
//! index/index.bin                     vector snapshot (see `index`)
//! clusters/cluster_model.json         k, seed, centroids, assignments, silhouette
//! clusters/k_selection.json           silhouette and inertia per k
//! personas/contexts.json              retrieved passages per cluster
//! personas/persona_<cluster>.json     one document per persona
//! personas/diversity_report.json      RQE gate rounds
//! validation/cross_validation.json    per-attribute groundings and paired test
//! validation/inter_persona.json       profile similarity matrix
//! simulation/transcript.jsonl         see `simulation`
//! analysis/analysis.json              counts, series, divergence, attribution
//! analysis/similarity_series.csv      turn,value
//! analysis/divergence_matrix.csv
//! analysis/attribution_matrix.csv
//! report.txt
//! ```
//!
//! Everything except the manifest (which carries timestamps) is a pure
//! function of the inputs and the configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    attribute_messages, matrix_csv, operational_divergence, rolling_similarity, AnalysisError, AttributionReport,
    DivergenceReport, SimilaritySeries, DEFAULT_DIVERGENCE_TURNS, DEFAULT_TEMPERATURE, DEFAULT_WINDOW,
};
use crate::clustering::{
    annotate_index, select_k_with_fit, ClusterError, ClusterModel, KMeansOptions, KSelectionReport, SelectOptions,
    DEFAULT_K_MAX, DEFAULT_K_MIN, DEFAULT_MAX_ITER, DEFAULT_N_INIT, DEFAULT_TOL,
};
use crate::completion::{CompletionConfig, CompletionKind, CompletionProvider};
use crate::corpus::{
    chunk_posts, ingest, preprocess, write_archive, Chunk, ChunkConfig, CleanPost, CorpusError, Rejection, StopWords,
    DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE, DEFAULT_MIN_WORDS,
};
use crate::embedding::{Embedder, EmbedderConfig, EmbedderKind, EmbeddingError};
use crate::grounding::{cross_validate, inter_persona_matrix, CrossValidationReport, GroundingConfig, GroundingError, InterPersonaMatrix};
use crate::index::{EntryMetadata, IndexEntry, IndexError, VectorIndex};
use crate::persona::{
    diversity_gate, retrieve_context, ContextPassage, DiversityReport, GateConfig, Persona, PersonaError,
    PersonaGenerator, DEFAULT_CONTEXT_SIZE, DEFAULT_MAX_ROUNDS, DEFAULT_RQE_THRESHOLD,
};
use crate::simulation::{run_simulation, SimulationConfig, SimulationError, Transcript};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BINARY_NAME: &str = "persona-eco";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("`{stage}` needs `{needed}` to have completed first; run `{BINARY_NAME} {needed}`")]
    MissingStage { stage: Stage, needed: Stage },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Preprocess,
    Embed,
    Cluster,
    Generate,
    Validate,
    Simulate,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Preprocess,
        Stage::Embed,
        Stage::Cluster,
        Stage::Generate,
        Stage::Validate,
        Stage::Simulate,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Preprocess => "preprocess",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Generate => "generate",
            Stage::Validate => "validate",
            Stage::Simulate => "simulate",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    /// Stage whose artifacts this one reads.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Ingest => None,
            Stage::Preprocess => Some(Stage::Ingest),
            Stage::Embed => Some(Stage::Preprocess),
            Stage::Cluster => Some(Stage::Embed),
            Stage::Generate => Some(Stage::Cluster),
            Stage::Validate => Some(Stage::Generate),
            Stage::Simulate => Some(Stage::Validate),
            Stage::Analyze => Some(Stage::Simulate),
            Stage::Report => Some(Stage::Analyze),
        }
    }

    fn artifacts(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["corpus/posts.jsonl", "corpus/ingest_report.json"],
            Stage::Preprocess => &["corpus/clean_posts.jsonl", "corpus/chunks.jsonl"],
            Stage::Embed => &["index/index.bin"],
            Stage::Cluster => &["clusters/cluster_model.json", "clusters/k_selection.json"],
            Stage::Generate => &["personas/contexts.json", "personas/diversity_report.json"],
            Stage::Validate => &["validation/cross_validation.json", "validation/inter_persona.json"],
            Stage::Simulate => &["simulation/transcript.jsonl"],
            Stage::Analyze => &[
                "analysis/analysis.json",
                "analysis/similarity_series.csv",
                "analysis/attribution_matrix.csv",
            ],
            Stage::Report => &["report.txt"],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSettings {
    pub min_words: usize,
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            min_words: DEFAULT_MIN_WORDS,
            chunk_size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_CHUNK_OVERLAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringSettings {
    pub k_min: usize,
    pub k_max: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub silhouette_sample: Option<usize>,
}

impl Default for ClusteringSettings {
    fn default() -> Self {
        Self {
            k_min: DEFAULT_K_MIN,
            k_max: DEFAULT_K_MAX,
            n_init: DEFAULT_N_INIT,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            silhouette_sample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonaSettings {
    pub context_size: usize,
    pub rqe_threshold: f64,
    pub max_rounds: usize,
    pub pairs_per_directive: usize,
}

impl Default for PersonaSettings {
    fn default() -> Self {
        Self {
            context_size: DEFAULT_CONTEXT_SIZE,
            rqe_threshold: DEFAULT_RQE_THRESHOLD,
            max_rounds: DEFAULT_MAX_ROUNDS,
            pairs_per_directive: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSettings {
    pub window: usize,
    pub temperature: f64,
    pub divergence_turns: Vec<usize>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            temperature: DEFAULT_TEMPERATURE,
            divergence_turns: DEFAULT_DIVERGENCE_TURNS.to_vec(),
        }
    }
}

/// Every threshold and seed in one document. `seed` is copied into the
/// completion and simulation settings when the pipeline runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSettings,
    pub embedding: EmbedderConfig,
    pub clustering: ClusteringSettings,
    pub completion: CompletionConfig,
    pub persona: PersonaSettings,
    pub grounding: GroundingConfig,
    pub simulation: SimulationConfig,
    pub analysis: AnalysisSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: CorpusSettings::default(),
            embedding: EmbedderConfig::default(),
            clustering: ClusteringSettings::default(),
            completion: CompletionConfig::default(),
            persona: PersonaSettings::default(),
            grounding: GroundingConfig::default(),
            simulation: SimulationConfig::default(),
            analysis: AnalysisSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.into(),
            source,
        })?;
        let config: Self = toml::from_str(&text).map_err(|source| PipelineError::Toml {
            path: path.into(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Points both remote providers at an OpenAI-style base URL and selects them.
    pub fn set_provider_base_url(&mut self, base: &str) {
        let base = base.trim_end_matches('/');
        self.completion.kind = CompletionKind::Remote;
        self.completion.remote.endpoint = format!("{base}/chat/completions");
        self.embedding.kind = EmbedderKind::Remote;
        self.embedding.remote.endpoint = format!("{base}/embeddings");
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PipelineError::Config(m));
        let c = &self.clustering;
        if c.k_min < 2 || c.k_max < c.k_min {
            return fail(format!("k range {}..={} (need 2 <= k_min <= k_max)", c.k_min, c.k_max));
        }
        if !(0.0..=1.0).contains(&self.persona.rqe_threshold) {
            return fail(format!("rqe_threshold {} outside [0, 1]", self.persona.rqe_threshold));
        }
        if !(-1.0..=1.0).contains(&self.grounding.threshold) {
            return fail(format!("grounding threshold {} outside [-1, 1]", self.grounding.threshold));
        }
        if self.grounding.k_retrieve == 0 || self.persona.context_size == 0 {
            return fail("k_retrieve and context_size must be positive".into());
        }
        if self.analysis.window == 0 {
            return fail("window must be at least 1".into());
        }
        if !(self.analysis.temperature > 0.0 && self.analysis.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.analysis.temperature));
        }
        if self.corpus.min_words == 0 {
            return fail("min_words must be positive".into());
        }
        ChunkConfig::new(self.corpus.chunk_size, self.corpus.overlap)?;
        for iv in &self.simulation.interventions {
            if iv.turn == 0 || iv.turn > self.simulation.turns {
                return fail(format!("intervention turn {} outside 1..={}", iv.turn, self.simulation.turns));
            }
        }
        Ok(())
    }

    /// The configuration with the top-level seed propagated.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.completion.seed = self.seed;
        c.simulation.seed = self.seed;
        c
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.effective()).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed: bool,
    pub artifacts: Vec<String>,
    pub completed_at_unix: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub created_at_unix: u64,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.get(&stage).is_some_and(|r| r.completed)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub source: String,
    pub accepted: usize,
    pub rejected: usize,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub turns: usize,
    pub agent_messages: usize,
    pub moderator_messages: usize,
    pub passes: usize,
}

impl MessageCounts {
    pub fn of(t: &Transcript) -> Self {
        Self {
            turns: t.messages.iter().map(|m| m.turn).max().unwrap_or(0),
            agent_messages: t.agent_messages().count(),
            moderator_messages: t.moderator_messages().count(),
            passes: t.passes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub transcript: String,
    pub counts: MessageCounts,
    pub series: SimilaritySeries,
    pub divergence: Option<DivergenceReport>,
    /// Why the divergence analysis was skipped, if it was.
    pub divergence_note: Option<String>,
    pub attribution: AttributionReport,
}

/// Computes every transcript analysis. Divergence is optional: a transcript
/// without the configured turns still gets the other analyses.
pub fn analyze_transcript(
    transcript: &Transcript,
    personas: &[Persona],
    embedder: &dyn Embedder,
    settings: &AnalysisSettings,
    label: &str,
) -> Result<AnalysisBundle, AnalysisError> {
    let series = rolling_similarity(transcript, embedder, settings.window)?;
    let (divergence, divergence_note) = match operational_divergence(transcript, embedder, &settings.divergence_turns) {
        Ok(d) => (Some(d), None),
        Err(e @ (AnalysisError::MissingTurn(_) | AnalysisError::TooFewPersonas(_))) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let attribution = attribute_messages(transcript, personas, embedder, settings.temperature)?;
    Ok(AnalysisBundle {
        transcript: label.to_string(),
        counts: MessageCounts::of(transcript),
        series,
        divergence,
        divergence_note,
        attribution,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| PipelineError::Json {
        path: path.into(),
        source,
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.into(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| PipelineError::Json {
                path: path.into(),
                source,
            })
        })
        .collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| PipelineError::Io {
        path: path.into(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for v in values {
        serde_json::to_writer(&mut out, v).expect("artifact serializes");
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub struct Pipeline {
    dir: PathBuf,
    config: PipelineConfig,
    manifest: RunManifest,
    embedder: Option<Arc<dyn Embedder>>,
    completion: Option<Arc<dyn CompletionProvider>>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline").field("dir", &self.dir).field("manifest", &self.manifest).finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Opens (or creates) a run directory. Stage flags whose artifacts are
    /// missing or unreadable are cleared.
    pub fn open(dir: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| PipelineError::Io {
            path: dir.clone(),
            source,
        })?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest: RunManifest = if manifest_path.exists() {
            read_json(&manifest_path)?
        } else {
            RunManifest {
                run_id: dir.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned()),
                created_at_unix: now(),
                ..RunManifest::default()
            }
        };
        manifest.config_hash = config.hash();
        write_json(&dir.join("config.json"), &config.effective())?;
        let mut pipeline = Self {
            dir,
            config: config.effective(),
            manifest,
            embedder: None,
            completion: None,
        };
        pipeline.verify()?;
        Ok(pipeline)
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn with_completion(mut self, provider: Arc<dyn CompletionProvider>) -> Self {
        self.completion = Some(provider);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// The injected embedder, or one built from the configuration.
    pub fn embedder(&mut self) -> Result<Arc<dyn Embedder>> {
        if self.embedder.is_none() {
            self.embedder = Some(Arc::from(self.config.embedding.build()?));
        }
        Ok(self.embedder.clone().expect("just set"))
    }

    pub fn completion(&mut self) -> Arc<dyn CompletionProvider> {
        self.completion.get_or_insert_with(|| Arc::from(self.config.completion.build())).clone()
    }

    /// Re-reads the artifacts of every claimed stage and clears the flags of
    /// stages that no longer validate.
    pub fn verify(&mut self) -> Result<Vec<Stage>> {
        let mut cleared = Vec::new();
        for stage in Stage::ALL {
            if self.manifest.is_complete(stage) && self.check_artifacts(stage).is_err() {
                tracing::warn!(%stage, "artifact missing or invalid; clearing stage flag");
                self.manifest.stages.remove(&stage);
                cleared.push(stage);
            }
        }
        if !cleared.is_empty() {
            self.save_manifest()?;
        }
        Ok(cleared)
    }

    fn check_artifacts(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Ingest => {
                ingest(self.path("corpus/posts.jsonl"))?;
                read_json::<IngestSummary>(&self.path("corpus/ingest_report.json"))?;
            }
            Stage::Preprocess => {
                self.clean_posts()?;
                self.chunks()?;
            }
            Stage::Embed => {
                VectorIndex::load(self.path("index/index.bin"))?;
            }
            Stage::Cluster => {
                self.cluster_model()?;
                read_json::<KSelectionReport>(&self.path("clusters/k_selection.json"))?;
            }
            Stage::Generate => {
                self.personas()?;
                read_json::<DiversityReport>(&self.path("personas/diversity_report.json"))?;
                read_json::<BTreeMap<usize, Vec<ContextPassage>>>(&self.path("personas/contexts.json"))?;
            }
            Stage::Validate => {
                read_json::<CrossValidationReport>(&self.path("validation/cross_validation.json"))?;
                read_json::<InterPersonaMatrix>(&self.path("validation/inter_persona.json"))?;
            }
            Stage::Simulate => {
                Transcript::read(self.path("simulation/transcript.jsonl"))?.validate()?;
            }
            Stage::Analyze => {
                self.analysis()?;
            }
            Stage::Report => {
                fs::read_to_string(self.path("report.txt")).map_err(|source| PipelineError::Io {
                    path: self.path("report.txt"),
                    source,
                })?;
            }
        }
        for rel in stage.artifacts() {
            if !self.path(rel).is_file() {
                return Err(PipelineError::Io {
                    path: self.path(rel),
                    source: std::io::ErrorKind::NotFound.into(),
                });
            }
        }
        Ok(())
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.path(MANIFEST_FILE), &self.manifest)
    }

    fn require(&self, stage: Stage) -> Result<()> {
        match stage.prerequisite() {
            Some(needed) if !self.manifest.is_complete(needed) => Err(PipelineError::MissingStage { stage, needed }),
            _ => Ok(()),
        }
    }

    fn complete(&mut self, stage: Stage, mut artifacts: Vec<String>) -> Result<()> {
        artifacts.sort();
        self.check_artifacts(stage)?;
        self.manifest.stages.insert(
            stage,
            StageRecord {
                completed: true,
                artifacts,
                completed_at_unix: now(),
                config_hash: self.manifest.config_hash.clone(),
            },
        );
        // Downstream artifacts were derived from the old output.
        for later in Stage::ALL.iter().filter(|s| **s > stage) {
            self.manifest.stages.remove(later);
        }
        self.save_manifest()?;
        tracing::info!(%stage, "stage complete");
        Ok(())
    }

    fn default_artifacts(stage: Stage) -> Vec<String> {
        stage.artifacts().iter().map(|s| s.to_string()).collect()
    }

    pub fn ingest(&mut self, source: &Path) -> Result<IngestSummary> {
        let report = ingest(source)?;
        write_bytes(&self.path("corpus/posts.jsonl"), &[])?;
        write_archive(&report.records, self.path("corpus/posts.jsonl")).map_err(|source| PipelineError::Io {
            path: self.path("corpus/posts.jsonl"),
            source,
        })?;
        let summary = IngestSummary {
            source: source.display().to_string(),
            accepted: report.records.len(),
            rejected: report.rejections.len(),
            rejections: report.rejections,
        };
        write_json(&self.path("corpus/ingest_report.json"), &summary)?;
        self.complete(Stage::Ingest, Self::default_artifacts(Stage::Ingest))?;
        Ok(summary)
    }

    pub fn clean_posts(&self) -> Result<Vec<CleanPost>> {
        read_jsonl(&self.path("corpus/clean_posts.jsonl"))
    }

    pub fn chunks(&self) -> Result<Vec<Chunk>> {
        read_jsonl(&self.path("corpus/chunks.jsonl"))
    }

    pub fn preprocess(&mut self) -> Result<(usize, usize)> {
        self.require(Stage::Preprocess)?;
        let posts = ingest(self.path("corpus/posts.jsonl"))?.records;
        let settings = &self.config.corpus;
        let clean = preprocess(&posts, &StopWords::english(), settings.min_words)?;
        let chunks = chunk_posts(&clean, ChunkConfig::new(settings.chunk_size, settings.overlap)?)?;
        write_jsonl(&self.path("corpus/clean_posts.jsonl"), &clean)?;
        write_jsonl(&self.path("corpus/chunks.jsonl"), &chunks)?;
        self.complete(Stage::Preprocess, Self::default_artifacts(Stage::Preprocess))?;
        Ok((clean.len(), chunks.len()))
    }

    pub fn embed(&mut self) -> Result<usize> {
        self.require(Stage::Embed)?;
        let chunks = self.chunks()?;
        let embedder = self.embedder()?;
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let index = VectorIndex::new(embedder.dimension());
        if !texts.is_empty() {
            let vectors = embedder.embed(&texts)?;
            let entries = chunks
                .iter()
                .zip(vectors)
                .map(|(c, vector)| IndexEntry {
                    entry_id: c.entry_id(),
                    vector,
                    metadata: EntryMetadata::new(&c.post_id, c.seq),
                })
                .collect();
            index.upsert(entries)?;
        }
        let path = self.path("index/index.bin");
        write_bytes(&path, &[])?;
        index.save(&path)?;
        self.complete(Stage::Embed, Self::default_artifacts(Stage::Embed))?;
        Ok(index.len())
    }

    pub fn cluster_model(&self) -> Result<ClusterModel> {
        read_json(&self.path("clusters/cluster_model.json"))
    }

    /// The embedded index with cluster assignments applied.
    pub fn annotated_index(&self) -> Result<VectorIndex> {
        let index = VectorIndex::load(self.path("index/index.bin"))?;
        annotate_index(&self.cluster_model()?, &index)?;
        Ok(index)
    }

    pub fn cluster(&mut self) -> Result<KSelectionReport> {
        self.require(Stage::Cluster)?;
        let index = VectorIndex::load(self.path("index/index.bin"))?;
        let entries = index.entries();
        let ids: Vec<String> = entries.iter().map(|e| e.entry_id.clone()).collect();
        let points: Vec<&[f64]> = entries.iter().map(|e| e.vector.values()).collect();
        let c = &self.config.clustering;
        let options = SelectOptions {
            k_min: c.k_min,
            k_max: c.k_max,
            kmeans: KMeansOptions {
                max_iter: c.max_iter,
                tol: c.tol,
                n_init: c.n_init,
            },
            silhouette_sample: c.silhouette_sample,
        };
        let (report, fit) = select_k_with_fit(&points, self.config.seed, options)?;
        let model = ClusterModel::from_fit(&ids, &fit, report.scores[&report.chosen_k]);
        write_json(&self.path("clusters/cluster_model.json"), &model)?;
        write_json(&self.path("clusters/k_selection.json"), &report)?;
        self.complete(Stage::Cluster, Self::default_artifacts(Stage::Cluster))?;
        Ok(report)
    }

    pub fn personas(&self) -> Result<Vec<Persona>> {
        let report: DiversityReport = read_json(&self.path("personas/diversity_report.json"))?;
        if !report.accepted {
            return Err(PipelineError::Config("persona set did not pass the diversity gate".into()));
        }
        let mut personas = Vec::new();
        for c in 0..self.cluster_model()?.k {
            let path = self.path(&format!("personas/persona_{c}.json"));
            if path.exists() {
                let p: Persona = read_json(&path)?;
                p.validate()?;
                personas.push(p);
            }
        }
        if personas.len() != report.names.len() {
            return Err(PipelineError::Config("persona documents do not match the diversity report".into()));
        }
        Ok(personas)
    }

    pub fn generate(&mut self) -> Result<DiversityReport> {
        self.require(Stage::Generate)?;
        let model = self.cluster_model()?;
        let index = self.annotated_index()?;
        let text_of: BTreeMap<String, String> = self.chunks()?.into_iter().map(|c| (c.entry_id(), c.text)).collect();
        let embedder = self.embedder()?;
        let mut contexts = BTreeMap::new();
        for cluster in 0..model.k {
            let hits = retrieve_context(&index, &model, cluster, self.config.persona.context_size, embedder.provider_id())?;
            let passages = hits
                .into_iter()
                .map(|h| ContextPassage {
                    text: text_of.get(&h.entry_id).cloned().unwrap_or_default(),
                    entry_id: h.entry_id,
                    score: h.score,
                })
                .collect::<Vec<_>>();
            contexts.insert(cluster, passages);
        }
        write_json(&self.path("personas/contexts.json"), &contexts)?;

        let provider = self.completion();
        let generator = PersonaGenerator::new(provider.as_ref(), self.config.completion.temperature);
        let initial = generator.generate_all(&contexts, &[])?;
        let gate = GateConfig {
            threshold: self.config.persona.rqe_threshold,
            max_rounds: self.config.persona.max_rounds,
            pairs_per_directive: self.config.persona.pairs_per_directive,
        };
        let (personas, report) = match diversity_gate(initial, &contexts, &generator, embedder.as_ref(), &gate) {
            Ok(ok) => ok,
            Err(PersonaError::DiversityUnmet(report)) => {
                write_json(&self.path("personas/diversity_report.json"), &report)?;
                return Err(PersonaError::DiversityUnmet(report).into());
            }
            Err(e) => return Err(e.into()),
        };
        let mut artifacts = Self::default_artifacts(Stage::Generate);
        for p in &personas {
            let rel = format!("personas/persona_{}.json", p.source_cluster_id);
            write_json(&self.path(&rel), p)?;
            artifacts.push(rel);
        }
        write_json(&self.path("personas/diversity_report.json"), &report)?;
        self.complete(Stage::Generate, artifacts)?;
        Ok(report)
    }

    pub fn validate(&mut self) -> Result<CrossValidationReport> {
        self.require(Stage::Validate)?;
        let personas = self.personas()?;
        let index = self.annotated_index()?;
        let embedder = self.embedder()?;
        let report = cross_validate(&personas, &index, embedder.as_ref(), &self.config.grounding)?;
        let matrix = inter_persona_matrix(&personas, embedder.as_ref())?;
        write_json(&self.path("validation/cross_validation.json"), &report)?;
        write_json(&self.path("validation/inter_persona.json"), &matrix)?;
        self.complete(Stage::Validate, Self::default_artifacts(Stage::Validate))?;
        Ok(report)
    }

    /// Simulation settings for this run: configured values, the run seed,
    /// and the persona order as speaking order when none is configured.
    pub fn simulation_config(&self, personas: &[Persona]) -> SimulationConfig {
        let mut cfg = self.config.simulation.clone();
        if cfg.speaking_order.is_empty() {
            cfg.speaking_order = personas.iter().map(|p| p.name.clone()).collect();
        }
        cfg
    }

    pub fn simulate(&mut self) -> Result<Transcript> {
        self.require(Stage::Simulate)?;
        let personas = self.personas()?;
        let cfg = self.simulation_config(&personas);
        let provider = self.completion();
        let path = self.path("simulation/transcript.jsonl");
        write_bytes(&path, &[])?;
        let transcript = run_simulation(personas, cfg, provider, Some(&path))?;
        self.complete(Stage::Simulate, Self::default_artifacts(Stage::Simulate))?;
        Ok(transcript)
    }

    pub fn analysis(&self) -> Result<AnalysisBundle> {
        read_json(&self.path("analysis/analysis.json"))
    }

    /// Analyzes the run's transcript, or `transcript` when given (in which
    /// case no earlier stage is required).
    pub fn analyze(&mut self, transcript: Option<&Path>) -> Result<AnalysisBundle> {
        let (t, label) = match transcript {
            Some(p) => (Transcript::read(p)?, p.display().to_string()),
            None => {
                self.require(Stage::Analyze)?;
                (Transcript::read(self.path("simulation/transcript.jsonl"))?, "simulation/transcript.jsonl".into())
            }
        };
        t.validate()?;
        let embedder = self.embedder()?;
        let bundle = analyze_transcript(&t, &t.personas, embedder.as_ref(), &self.config.analysis, &label)?;
        let mut artifacts = Self::default_artifacts(Stage::Analyze);
        write_json(&self.path("analysis/analysis.json"), &bundle)?;
        write_bytes(&self.path("analysis/similarity_series.csv"), bundle.series.to_csv().as_bytes())?;
        let a = &bundle.attribution;
        write_bytes(&self.path("analysis/attribution_matrix.csv"), matrix_csv(&a.personas, &a.confusion).as_bytes())?;
        if let Some(d) = &bundle.divergence {
            write_bytes(&self.path("analysis/divergence_matrix.csv"), matrix_csv(&d.personas, &d.matrix).as_bytes())?;
            artifacts.push("analysis/divergence_matrix.csv".into());
        }
        self.complete(Stage::Analyze, artifacts)?;
        Ok(bundle)
    }

    /// Text report: clustering and diversity summary, the validation table
    /// and the attribution table, each when available.
    pub fn report(&mut self) -> Result<String> {
        self.require(Stage::Report)?;
        let mut out = String::new();
        if let Ok(k) = read_json::<KSelectionReport>(&self.path("clusters/k_selection.json")) {
            out += &format!("Clustering: k = {} (silhouette {:.3})\n", k.chosen_k, k.scores[&k.chosen_k]);
        }
        if let Ok(d) = read_json::<DiversityReport>(&self.path("personas/diversity_report.json")) {
            out += &format!(
                "Diversity: RQE {:.3} (threshold {:.2}, {} round(s), {})\n",
                d.rqe,
                d.threshold,
                d.iterations,
                if d.accepted { "accepted" } else { "rejected" }
            );
        }
        if let Ok(m) = read_json::<InterPersonaMatrix>(&self.path("validation/inter_persona.json")) {
            out += &format!("Inter-persona CS mean (off-diagonal): {:.3}\n", m.off_diagonal_mean);
        }
        if let Ok(v) = read_json::<CrossValidationReport>(&self.path("validation/cross_validation.json")) {
            out += &format!("\nCross-persona validation (k_retrieve {}, threshold {:.2})\n", v.k_retrieve, v.threshold);
            out += &v.render_table();
        }
        let a = self.analysis()?;
        out += &render_analysis(&a);
        write_bytes(&self.path("report.txt"), out.as_bytes())?;
        self.complete(Stage::Report, Self::default_artifacts(Stage::Report))?;
        Ok(out)
    }

    /// Runs every stage from `source` to the report.
    pub fn run_all(&mut self, source: &Path) -> Result<String> {
        self.ingest(source)?;
        self.preprocess()?;
        self.embed()?;
        self.cluster()?;
        self.generate()?;
        self.validate()?;
        self.simulate()?;
        self.analyze(None)?;
        self.report()
    }
}

pub fn render_analysis(a: &AnalysisBundle) -> String {
    let c = &a.counts;
    let mut out = format!(
        "\nTranscript {}: {} turns, {} agent messages, {} moderator messages, {} passes\n",
        a.transcript, c.turns, c.agent_messages, c.moderator_messages, c.passes
    );
    let s = &a.series;
    let at = |turn: Option<usize>| {
        turn.and_then(|t| s.points.iter().find(|p| p.turn == t))
            .map_or("-".to_string(), |p| format!("turn {} ({:.3})", p.turn, p.value))
    };
    out += &format!("Rolling similarity (window {}): max {}, min {}\n", s.window, at(s.argmax), at(s.argmin));
    match (&a.divergence, &a.divergence_note) {
        (Some(d), _) => {
            out += &format!(
                "Divergence over turns {:?}: mean {:.3} over {} pairs, range [{:.3}, {:.3}]",
                d.turn_subset, d.mean, d.pairs, d.min, d.max
            );
            if !d.absent.is_empty() {
                out += &format!(" (absent: {})", d.absent.join(", "));
            }
            out.push('\n');
        }
        (None, Some(note)) => out += &format!("Divergence skipped: {note}\n"),
        (None, None) => {}
    }
    out += &format!("\nAttribution (T = {})\n", a.attribution.temperature);
    out += &a.attribution.render_table();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_round_trip_and_defaults() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: PipelineConfig = toml::from_str("seed = 3\n[clustering]\nk_max = 6\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.clustering.k_max, 6);
        assert_eq!(partial.clustering.k_min, 3);
        assert_eq!(partial.simulation.turns, 9);
    }

    #[test]
    fn config_ranges_enforced() {
        let mut cfg = PipelineConfig::default();
        cfg.persona.rqe_threshold = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.clustering.k_min = 5;
        cfg.clustering.k_max = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ordering_guard_names_needed_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(dir.path(), PipelineConfig::default()).unwrap();
        let err = p.cluster().unwrap_err();
        assert!(matches!(err, PipelineError::MissingStage { needed: Stage::Embed, .. }));
        assert!(err.to_string().contains("persona-eco embed"));
    }

    #[test]
    fn base_url_selects_remote_providers() {
        let mut cfg = PipelineConfig::default();
        cfg.set_provider_base_url("http://localhost:9/v1/");
        assert_eq!(cfg.completion.remote.endpoint, "http://localhost:9/v1/chat/completions");
        assert_eq!(cfg.embedding.remote.endpoint, "http://localhost:9/v1/embeddings");
    }
}
