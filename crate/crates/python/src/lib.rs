//! Python module `persona_eco`.
//!
//! Structured results (personas, reports, transcripts, manifests) cross the
//! boundary as plain dicts and lists with the same shape as the JSON
//! artifacts the pipeline writes.

use std::fmt::Display;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use persona_ecosystem::analysis;
use persona_ecosystem::clustering::{self, KMeansOptions, SelectOptions};
use persona_ecosystem::completion::StubCompletion;
use persona_ecosystem::corpus::{self, ChunkConfig, StopWords};
use persona_ecosystem::embedding::{self as emb, Embedder, Embedding};
use persona_ecosystem::fixtures;
use persona_ecosystem::grounding;
use persona_ecosystem::index::{self, EntryMetadata, IndexEntry, MetadataFilter};
use persona_ecosystem::persona::{self as pers, Persona};
use persona_ecosystem::pipeline::{self, AnalysisSettings, PipelineConfig};
use persona_ecosystem::simulation::{self as sim, Intervention, SimulationConfig, Transcript};
use persona_ecosystem::stats::{self, Alternative, Sidedness};

create_exception!(persona_eco, PersonaEcoError, PyException);

fn err(e: impl Display) -> PyErr {
    PersonaEcoError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize + ?Sized>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn unit(values: Vec<f64>) -> PyResult<Embedding> {
    Embedding::normalized(values, "py").map_err(err)
}

// ---------------------------------------------------------------- statistics

/// Exact upper-tail binomial p-value `P(X >= k)`.
#[pyfunction]
fn binomial_test(k: u64, n: u64, p: f64) -> PyResult<f64> {
    stats::binomial_test(k, n, p, Alternative::Greater).map(|r| r.p_value).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (differences, two_sided = true))]
fn paired_t<'py>(py: Python<'py>, differences: Vec<f64>, two_sided: bool) -> PyResult<Bound<'py, PyAny>> {
    let sidedness = if two_sided { Sidedness::Two } else { Sidedness::Greater };
    to_py(py, &stats::paired_t(&differences, sidedness).map_err(err)?)
}

#[pyfunction]
fn cohens_d_paired(differences: Vec<f64>) -> PyResult<f64> {
    stats::cohens_d_paired(&differences).map_err(err)
}

#[pyfunction]
fn student_t_cdf(t: f64, df: f64) -> f64 {
    stats::student_t_cdf(t, df)
}

#[pyfunction]
fn clopper_pearson_lower(k: u64, n: u64, confidence: f64) -> PyResult<f64> {
    stats::clopper_pearson_lower(k, n, confidence).map_err(err)
}

#[pyfunction]
fn softmax(scores: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    stats::softmax(&scores, temperature).map_err(err)
}

// ---------------------------------------------------------------- corpus

#[pyfunction]
#[pyo3(signature = (text, chunk_size = corpus::DEFAULT_CHUNK_SIZE, overlap = corpus::DEFAULT_CHUNK_OVERLAP, post_id = "post"))]
fn chunk<'py>(
    py: Python<'py>,
    text: &str,
    chunk_size: usize,
    overlap: usize,
    post_id: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let config = ChunkConfig::new(chunk_size, overlap).map_err(err)?;
    to_py(py, &corpus::chunk(post_id, text, config).map_err(err)?)
}

/// Returns the filtered text and its word count.
#[pyfunction]
fn remove_stopwords(text: &str) -> (String, usize) {
    corpus::remove_stopwords(text, &StopWords::english())
}

// ---------------------------------------------------------------- embedding and index

#[pyclass(name = "HashEmbedder", frozen)]
struct PyHashEmbedder(emb::HashEmbedder);

#[pymethods]
impl PyHashEmbedder {
    #[new]
    #[pyo3(signature = (dimension = emb::DEFAULT_DIMENSION, seed = 0))]
    fn new(dimension: usize, seed: u64) -> PyResult<Self> {
        emb::HashEmbedder::new(dimension, seed).map(Self).map_err(err)
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.0.dimension()
    }

    #[getter]
    fn provider_id(&self) -> String {
        self.0.provider_id().to_string()
    }

    /// Unit vectors, one per text.
    fn embed(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        Ok(self.0.embed(&refs).map_err(err)?.into_iter().map(Embedding::into_values).collect())
    }
}

#[pyfunction]
fn cosine_similarity(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    emb::cosine_similarity(&unit(u)?, &unit(v)?).map_err(err)
}

#[pyclass(name = "VectorIndex", frozen)]
struct PyVectorIndex(index::VectorIndex);

#[pymethods]
impl PyVectorIndex {
    #[new]
    fn new(dimension: usize) -> Self {
        Self(index::VectorIndex::new(dimension))
    }

    /// Inserts or replaces entries; vectors are normalized. Returns
    /// `(inserted, updated)`.
    #[pyo3(signature = (entry_ids, vectors, cluster_ids = None))]
    fn upsert(
        &self,
        entry_ids: Vec<String>,
        vectors: Vec<Vec<f64>>,
        cluster_ids: Option<Vec<usize>>,
    ) -> PyResult<(usize, usize)> {
        if entry_ids.len() != vectors.len() || cluster_ids.as_ref().is_some_and(|c| c.len() != vectors.len()) {
            return Err(err("entry_ids, vectors and cluster_ids must have equal lengths"));
        }
        let entries = entry_ids
            .into_iter()
            .zip(vectors)
            .enumerate()
            .map(|(i, (id, v))| {
                let (post, seq) = id.rsplit_once('#').and_then(|(p, s)| Some((p, s.parse().ok()?))).unwrap_or((&id, 0));
                let mut metadata = EntryMetadata::new(post, seq);
                metadata.cluster_id = cluster_ids.as_ref().map(|c| c[i]);
                Ok(IndexEntry {
                    entry_id: id.clone(),
                    vector: unit(v)?,
                    metadata,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let counts = self.0.upsert(entries).map_err(err)?;
        Ok((counts.inserted, counts.updated))
    }

    /// Top-k `(entry_id, score)` pairs, score descending then id ascending.
    #[pyo3(signature = (vector, top_k, cluster_id = None))]
    fn query(&self, vector: Vec<f64>, top_k: usize, cluster_id: Option<usize>) -> PyResult<Vec<(String, f64)>> {
        let filter = cluster_id.map(MetadataFilter::cluster);
        let hits = self.0.query(&unit(vector)?, top_k, filter.as_ref()).map_err(err)?;
        Ok(hits.into_iter().map(|h| (h.entry_id, h.score)).collect())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        index::VectorIndex::load(path).map(Self).map_err(err)
    }
}

// ---------------------------------------------------------------- clustering

#[pyfunction]
#[pyo3(signature = (points, k, seed = 0, n_init = clustering::DEFAULT_N_INIT))]
fn kmeans<'py>(py: Python<'py>, points: Vec<Vec<f64>>, k: usize, seed: u64, n_init: usize) -> PyResult<Bound<'py, PyAny>> {
    let options = KMeansOptions {
        n_init,
        ..KMeansOptions::default()
    };
    let fit = py.detach(|| clustering::kmeans(&points, k, seed, options)).map_err(err)?;
    to_py(py, &fit)
}

#[pyfunction]
fn silhouette(points: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    clustering::silhouette(&points, &labels).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (points, seed = 0, k_min = clustering::DEFAULT_K_MIN, k_max = clustering::DEFAULT_K_MAX))]
fn select_k<'py>(
    py: Python<'py>,
    points: Vec<Vec<f64>>,
    seed: u64,
    k_min: usize,
    k_max: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let options = SelectOptions {
        k_min,
        k_max,
        ..SelectOptions::default()
    };
    let report = py.detach(|| clustering::select_k(&points, seed, options)).map_err(err)?;
    to_py(py, &report)
}

// ---------------------------------------------------------------- personas and grounding

#[pyfunction]
fn rqe(vectors: Vec<Vec<f64>>) -> PyResult<f64> {
    let vectors = vectors.into_iter().map(unit).collect::<PyResult<Vec<_>>>()?;
    pers::rqe(&vectors, None).map_err(err)
}

#[pyfunction]
fn rqe_from_similarity(matrix: Vec<Vec<f64>>) -> PyResult<f64> {
    pers::rqe_from_similarity(&matrix, None).map_err(err)
}

#[pyfunction]
fn reference_personas(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &fixtures::reference_personas())
}

#[pyfunction]
fn reference_similarity() -> Vec<Vec<f64>> {
    fixtures::reference_similarity()
}

/// Profile cosine matrix of persona dicts under the hash embedder.
#[pyfunction]
#[pyo3(signature = (personas, dimension = emb::DEFAULT_DIMENSION, seed = 0))]
fn inter_persona_matrix<'py>(
    py: Python<'py>,
    personas: &Bound<'py, PyAny>,
    dimension: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let personas: Vec<Persona> = from_py(personas)?;
    let embedder = emb::HashEmbedder::new(dimension, seed).map_err(err)?;
    to_py(py, &grounding::inter_persona_matrix(&personas, &embedder).map_err(err)?)
}

// ---------------------------------------------------------------- simulation and analysis

/// Stepwise discussion driven by the deterministic stub provider.
#[pyclass(name = "Session")]
struct PySession(Mutex<sim::Session>);

#[pymethods]
impl PySession {
    /// `personas` defaults to the reference set; `interventions` to the
    /// default three; `passes` lists `(persona, turn)` pairs that pass.
    #[new]
    #[pyo3(signature = (personas = None, turns = sim::DEFAULT_TURNS, seed = 0, interventions = None, passes = Vec::new()))]
    fn new(
        personas: Option<&Bound<'_, PyAny>>,
        turns: usize,
        seed: u64,
        interventions: Option<Vec<(usize, String)>>,
        passes: Vec<(String, usize)>,
    ) -> PyResult<Self> {
        let personas = match personas {
            Some(p) => from_py(p)?,
            None => fixtures::reference_personas(),
        };
        let mut config = SimulationConfig {
            turns,
            seed,
            ..SimulationConfig::default()
        };
        match interventions {
            Some(ivs) => config.interventions = ivs.into_iter().map(|(turn, text)| Intervention { turn, text }).collect(),
            None => config.interventions.retain(|iv| iv.turn <= turns),
        }
        let stub = passes.iter().fold(StubCompletion::new(seed), |s, (name, turn)| s.with_pass(name, *turn));
        sim::Session::new("py", personas, config, Arc::new(stub)).map(|s| Self(Mutex::new(s))).map_err(err)
    }

    /// Runs the next turn and returns its messages.
    fn step<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let messages = self.0.lock().unwrap().step_turn().map_err(err)?;
        to_py(py, &messages)
    }

    #[pyo3(signature = (text, turn = None))]
    fn post_intervention<'py>(&self, py: Python<'py>, text: &str, turn: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let iv = self.0.lock().unwrap().post_intervention(text, turn).map_err(err)?;
        to_py(py, &iv)
    }

    #[getter]
    fn is_complete(&self) -> bool {
        self.0.lock().unwrap().is_complete()
    }

    fn transcript<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.lock().unwrap().transcript())
    }

    /// Transcript in the JSONL file format.
    fn to_jsonl(&self) -> String {
        self.0.lock().unwrap().transcript().to_jsonl()
    }
}

/// The bundled nine-turn transcript (44 agent and 3 moderator messages) as JSONL.
#[pyfunction]
fn reference_transcript() -> &'static str {
    fixtures::REFERENCE_TRANSCRIPT_JSONL
}

/// Series, divergence and attribution for a JSONL transcript, embedded with
/// the hash embedder against the personas in its header.
#[pyfunction]
#[pyo3(signature = (
    jsonl,
    window = analysis::DEFAULT_WINDOW,
    temperature = analysis::DEFAULT_TEMPERATURE,
    divergence_turns = analysis::DEFAULT_DIVERGENCE_TURNS.to_vec(),
    dimension = emb::DEFAULT_DIMENSION,
    seed = 0
))]
fn analyze_transcript<'py>(
    py: Python<'py>,
    jsonl: &str,
    window: usize,
    temperature: f64,
    divergence_turns: Vec<usize>,
    dimension: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let transcript = Transcript::from_jsonl(jsonl).map_err(err)?;
    let embedder = emb::HashEmbedder::new(dimension, seed).map_err(err)?;
    let settings = AnalysisSettings {
        window,
        temperature,
        divergence_turns,
    };
    let bundle = py
        .detach(|| pipeline::analyze_transcript(&transcript, &transcript.personas, &embedder, &settings, "transcript"))
        .map_err(err)?;
    to_py(py, &bundle)
}

// ---------------------------------------------------------------- pipeline

/// A run directory. `config` is a TOML file path; defaults apply without one.
#[pyclass(name = "Pipeline")]
struct PyPipeline(pipeline::Pipeline);

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (run_dir, config = None))]
    fn new(run_dir: PathBuf, config: Option<PathBuf>) -> PyResult<Self> {
        let config = match config {
            Some(path) => PipelineConfig::load(path).map_err(err)?,
            None => PipelineConfig::default(),
        };
        pipeline::Pipeline::open(run_dir, config).map(Self).map_err(err)
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.0.manifest())
    }

    fn ingest<'py>(&mut self, py: Python<'py>, source: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let summary = py.detach(|| self.0.ingest(&source)).map_err(err)?;
        to_py(py, &summary)
    }

    /// Returns `(posts kept, chunks)`.
    fn preprocess(&mut self, py: Python<'_>) -> PyResult<(usize, usize)> {
        py.detach(|| self.0.preprocess()).map_err(err)
    }

    fn embed(&mut self, py: Python<'_>) -> PyResult<usize> {
        py.detach(|| self.0.embed()).map_err(err)
    }

    fn cluster<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| self.0.cluster()).map_err(err)?;
        to_py(py, &report)
    }

    fn generate<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| self.0.generate()).map_err(err)?;
        to_py(py, &report)
    }

    fn validate<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| self.0.validate()).map_err(err)?;
        to_py(py, &report)
    }

    fn simulate<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let transcript = py.detach(|| self.0.simulate()).map_err(err)?;
        to_py(py, &transcript)
    }

    #[pyo3(signature = (transcript = None))]
    fn analyze<'py>(&mut self, py: Python<'py>, transcript: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        let bundle = py.detach(|| self.0.analyze(transcript.as_deref())).map_err(err)?;
        to_py(py, &bundle)
    }

    fn report(&mut self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| self.0.report()).map_err(err)
    }

    fn run_all(&mut self, py: Python<'_>, source: PathBuf) -> PyResult<String> {
        py.detach(|| self.0.run_all(&source)).map_err(err)
    }

    fn personas<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.personas().map_err(err)?)
    }
}

#[pymodule]
fn persona_eco(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PersonaEcoError", m.py().get_type::<PersonaEcoError>())?;
    m.add_class::<PyHashEmbedder>()?;
    m.add_class::<PyVectorIndex>()?;
    m.add_class::<PySession>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(binomial_test, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t, m)?)?;
    m.add_function(wrap_pyfunction!(cohens_d_paired, m)?)?;
    m.add_function(wrap_pyfunction!(student_t_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(clopper_pearson_lower, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(chunk, m)?)?;
    m.add_function(wrap_pyfunction!(remove_stopwords, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(select_k, m)?)?;
    m.add_function(wrap_pyfunction!(rqe, m)?)?;
    m.add_function(wrap_pyfunction!(rqe_from_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(reference_personas, m)?)?;
    m.add_function(wrap_pyfunction!(reference_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(inter_persona_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(reference_transcript, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_transcript, m)?)?;
    Ok(())
}
