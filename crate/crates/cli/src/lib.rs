//! The `conductor` command line: train models, generate offline, serve a
//! live session, inspect checkpoints and measure throughput.

pub mod schedule;

mod bench;
mod generate;
mod inspect;
mod serve;
mod train;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use conductor_core::checkpoint;
use conductor_core::lstm::{ModelArchitecture, ModelCheckpoint};
use conductor_server::config::Manifest;

pub use bench::BenchArgs;
pub use generate::GenerateArgs;
pub use inspect::InspectArgs;
pub use serve::ServeArgs;
pub use train::TrainArgs;

#[derive(Debug, Parser)]
#[command(name = "conductor", version, about = "Train, mix and serve character-level LSTMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on a text corpus
    Train(TrainArgs),
    /// Generate text offline from a weighted ensemble
    Generate(GenerateArgs),
    /// Run a live session over TCP and OSC
    Serve(ServeArgs),
    /// Summarize a checkpoint file
    Inspect(InspectArgs),
    /// Measure generation speed against the number of active models
    Bench(BenchArgs),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or missing input files.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<conductor_core::Error> for CliError {
    fn from(e: conductor_core::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<conductor_server::ServerError> for CliError {
    fn from(e: conductor_server::ServerError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Generate(a) => generate::run(a),
        Command::Serve(a) => serve::run(a),
        Command::Inspect(a) => inspect::run(a),
        Command::Bench(a) => bench::run(a),
    }
}

pub(crate) fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

pub(crate) fn parse_layers(spec: &str) -> CliResult<ModelArchitecture> {
    let sizes = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("--layers {spec:?}: {e}")))?;
    ModelArchitecture::new(sizes).map_err(|e| CliError::Usage(format!("--layers: {e}")))
}

/// Where the models of a command come from.
#[derive(Debug, Clone, Args)]
pub struct ModelSource {
    /// JSON manifest listing checkpoints and display names
    #[arg(long, conflicts_with = "model")]
    pub manifest: Option<PathBuf>,
    /// Checkpoint file; repeat for several models
    #[arg(long)]
    pub model: Vec<PathBuf>,
}

impl ModelSource {
    pub fn is_empty(&self) -> bool {
        self.manifest.is_none() && self.model.is_empty()
    }

    pub fn load(&self) -> CliResult<Vec<(String, Arc<ModelCheckpoint>)>> {
        if let Some(m) = &self.manifest {
            require_file(m)?;
            let manifest = Manifest::load(m).map_err(|e| CliError::Usage(e.to_string()))?;
            for spec in &manifest.models {
                require_file(&spec.path)?;
            }
            return Ok(manifest.load_models()?);
        }
        if self.model.is_empty() {
            return Err(CliError::Usage("give --manifest or at least one --model".into()));
        }
        self.model
            .iter()
            .map(|p| {
                require_file(p)?;
                let ck = checkpoint::load(p)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                Ok((name, Arc::new(ck)))
            })
            .collect()
    }
}

pub(crate) fn parse_weights(spec: &str) -> CliResult<Vec<f64>> {
    spec.split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("--weights {spec:?}: {e}")))
}
