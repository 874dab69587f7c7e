use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use persona_ecosystem::pipeline::{render_analysis, Pipeline, PipelineConfig, PipelineError};

use crate::service::{self, ServeError, ServiceState};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "persona-eco", version, about = "Persona ecosystem pipeline and moderation service")]
pub struct Cli {
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. Each overrides the config key of the
/// same name.
#[derive(Debug, Clone, Default, Args)]
pub struct Globals {
    /// Run directory holding the manifest and every stage artifact.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// OpenAI-style base URL; selects the remote embedding and completion providers.
    #[arg(long, global = true)]
    pub provider_base_url: Option<String>,
    #[arg(long, global = true)]
    pub k_min: Option<usize>,
    #[arg(long, global = true)]
    pub k_max: Option<usize>,
    #[arg(long, global = true)]
    pub rqe_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub grounding_threshold: Option<f64>,
    /// Simulation turns.
    #[arg(long, global = true)]
    pub turns: Option<usize>,
    /// Rolling-similarity window in turns.
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Attribution softmax temperature.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a post archive (JSON array or JSON lines) into the run.
    Ingest { source: PathBuf },
    /// Remove stop words, drop short posts and chunk.
    Preprocess,
    /// Embed chunks into the vector index.
    Embed,
    /// Select k and cluster the chunk embeddings.
    Cluster,
    /// Generate one persona per cluster behind the diversity gate.
    Generate,
    /// Ground persona attributes against the clusters.
    Validate,
    /// Run the moderated multi-persona discussion.
    Simulate,
    /// Analyze the run transcript, or any transcript file.
    Analyze {
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Render the text report.
    Report,
    /// Every stage from ingest to report.
    Run { source: PathBuf },
    /// Serve the HTTP and event-stream API over the run's personas.
    Serve {
        /// Overrides `service.listen` from the config file.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("{path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("cannot start async runtime: {0}")]
    Runtime(std::io::Error),
}

#[derive(Debug, Default, Deserialize)]
struct ServiceFile {
    #[serde(default)]
    service: ServiceSection,
}

#[derive(Debug, Default, Deserialize)]
struct ServiceSection {
    listen: Option<String>,
}

impl Globals {
    /// Pipeline configuration from the config file (or defaults) with every
    /// flag applied, plus the configured listen address.
    pub fn resolve(&self) -> Result<(PipelineConfig, Option<String>), CliError> {
        let (mut config, listen) = match &self.config {
            Some(path) => (PipelineConfig::load(path)?, read_listen(path)?),
            None => (PipelineConfig::default(), None),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(url) = &self.provider_base_url {
            config.set_provider_base_url(url);
        }
        if let Some(k) = self.k_min {
            config.clustering.k_min = k;
        }
        if let Some(k) = self.k_max {
            config.clustering.k_max = k;
        }
        if let Some(t) = self.rqe_threshold {
            config.persona.rqe_threshold = t;
        }
        if let Some(t) = self.grounding_threshold {
            config.grounding.threshold = t;
        }
        if let Some(turns) = self.turns {
            config.simulation.turns = turns;
            config.simulation.interventions.retain(|iv| iv.turn <= turns);
        }
        if let Some(w) = self.window {
            config.analysis.window = w;
        }
        if let Some(t) = self.temperature {
            config.analysis.temperature = t;
        }
        config.validate()?;
        Ok((config, listen))
    }
}

fn read_listen(path: &Path) -> Result<Option<String>, CliError> {
    let err = |message: String| CliError::ConfigFile {
        path: path.into(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let file: ServiceFile = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
    Ok(file.service.listen)
}

/// Runs one subcommand and returns what it prints on success.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let (config, listen) = cli.globals.resolve()?;
    let mut p = Pipeline::open(&cli.globals.run_dir, config)?;
    let out = match &cli.command {
        Command::Ingest { source } => {
            let s = p.ingest(source)?;
            let mut out = format!("ingested {} posts from {} ({} rejected)", s.accepted, s.source, s.rejected);
            for r in s.rejections.iter().take(5) {
                out += &format!("\n  rejected at {}: {}", r.location, r.reason);
            }
            out
        }
        Command::Preprocess => {
            let (posts, chunks) = p.preprocess()?;
            format!("{posts} posts kept, {chunks} chunks")
        }
        Command::Embed => format!("embedded {} chunks", p.embed()?),
        Command::Cluster => {
            let r = p.cluster()?;
            let scores: Vec<String> = r.scores.iter().map(|(k, s)| format!("k={k}: {s:.3}")).collect();
            format!("chose k = {} (silhouette {})", r.chosen_k, scores.join(", "))
        }
        Command::Generate => {
            let d = p.generate()?;
            format!(
                "{} personas: {}; RQE {:.3} after {} round(s), {}",
                d.names.len(),
                d.names.join(", "),
                d.rqe,
                d.iterations,
                if d.accepted { "accepted" } else { "below threshold" }
            )
        }
        Command::Validate => p.validate()?.render_table(),
        Command::Simulate => {
            let t = p.simulate()?;
            format!(
                "{} agent messages, {} moderator messages, {} passes",
                t.agent_messages().count(),
                t.moderator_messages().count(),
                t.passes()
            )
        }
        Command::Analyze { transcript } => render_analysis(&p.analyze(transcript.as_deref())?),
        Command::Report => p.report()?,
        Command::Run { source } => p.run_all(source)?,
        Command::Serve { listen: flag } => {
            let addr = flag.clone().or(listen).unwrap_or_else(|| DEFAULT_LISTEN.to_string());
            let state = std::sync::Arc::new(ServiceState::from_pipeline(&mut p)?);
            let runtime = tokio::runtime::Runtime::new().map_err(CliError::Runtime)?;
            runtime.block_on(service::serve(state, &addr))?;
            String::new()
        }
    };
    Ok(out)
}
