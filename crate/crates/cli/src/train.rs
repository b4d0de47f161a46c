use std::fs;
use std::path::PathBuf;

use clap::Args;
use conductor_core::checkpoint;
use conductor_core::corpus::{self, CorpusStats};
use conductor_core::training::{train_with, TrainConfig};
use serde::Serialize;

use crate::{parse_layers, require_file, CliError, CliResult};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Text corpus; bytes outside ASCII are dropped
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus name stored in the checkpoint [default: file stem]
    #[arg(long)]
    pub name: Option<String>,
    /// Hidden sizes, bottom layer first
    #[arg(long, default_value = "128")]
    pub layers: String,
    #[arg(long, default_value_t = 80)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 40)]
    pub stride: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long = "rng-seed", alias = "seed", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Suppress progress lines
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Serialize)]
struct CorpusSidecar<'a> {
    name: &'a str,
    path: String,
    #[serde(flatten)]
    stats: &'a CorpusStats,
}

pub fn run(a: TrainArgs) -> CliResult {
    require_file(&a.corpus)?;
    let arch = parse_layers(&a.layers)?;
    let config = TrainConfig {
        seq_len: a.seq_len,
        stride: a.stride,
        batch_size: a.batch,
        learning_rate: a.lr,
        grad_clip_norm: a.clip,
        dropout_prob: a.dropout,
        max_steps: a.steps,
        seed: a.seed,
        log_every: a.log_every,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.corpus
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });

    let raw = fs::read(&a.corpus)?;
    let (text, stats) = corpus::clean(&raw);
    let sidecar = CorpusSidecar {
        name: &name,
        path: a.corpus.display().to_string(),
        stats: &stats,
    };
    fs::write(
        a.out.with_extension("corpus.json"),
        serde_json::to_string_pretty(&sidecar).expect("serializable"),
    )?;

    let quiet = a.quiet;
    let (ck, report) = train_with(&name, text.as_bytes(), &arch, &config, |_, e| {
        if !quiet {
            eprintln!(
                "step {:>6}  nll {:.4}  bpc {:.4}  |g| {:.3}  {:.1}s",
                e.step, e.mean_nll, e.bits_per_char, e.grad_norm, e.wall_time_s
            );
        }
    })?;
    checkpoint::save(&ck, &a.out)?;
    fs::write(
        a.out.with_extension("report.json"),
        serde_json::to_string_pretty(&report).expect("serializable"),
    )?;
    fs::write(a.out.with_extension("report.csv"), report.to_csv())?;
    Ok(())
}
