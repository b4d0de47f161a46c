use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use conductor_core::beam::{beam_step, BeamConfig};
use conductor_core::ensemble::{Ensemble, EnsembleMember, MixtureWeights};
use conductor_core::numeric::Rng;

use crate::schedule::WeightSchedule;
use crate::{parse_weights, require_file, CliError, CliResult, ModelSource};

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub models: ModelSource,
    /// Comma-separated mixture weights, one per model [default: uniform]
    #[arg(long, conflicts_with = "schedule")]
    pub weights: Option<String>,
    /// JSON-lines weight schedule, interpolated over steps
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Text to condition on before generating
    #[arg(long, default_value = "")]
    pub seed_text: String,
    /// Number of characters to emit
    #[arg(long)]
    pub chars: u64,
    /// 0 picks the most likely character every step
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    /// Normalized weight a model must exceed to be run
    #[arg(long, default_value_t = conductor_core::ensemble::ACTIVE_THRESHOLD)]
    pub threshold: f64,
    /// Write one JSON event per character to this file
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Decode with beam search instead of sampling
    #[arg(long)]
    pub beam: bool,
    #[arg(long, default_value_t = 4)]
    pub beam_width: usize,
    #[arg(long, default_value_t = 3)]
    pub beam_depth: usize,
    #[arg(long, default_value_t = 4)]
    pub beam_branch: usize,
    #[arg(long, default_value_t = 1)]
    pub beam_commit: usize,
    /// Expand beam nodes by sampling instead of taking the top characters
    #[arg(long)]
    pub beam_stochastic: bool,
}

enum Weights {
    Fixed(MixtureWeights),
    Schedule(WeightSchedule),
}

pub fn run(a: GenerateArgs) -> CliResult {
    let beam = a.beam.then(|| BeamConfig {
        width: a.beam_width,
        depth: a.beam_depth,
        branch: a.beam_branch,
        commit: a.beam_commit,
        stochastic: a.beam_stochastic,
    });
    if let Some(b) = &beam {
        b.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if !(a.temperature >= 0.0 && a.temperature.is_finite()) {
        return Err(CliError::Usage(format!("--temperature {}", a.temperature)));
    }
    let models = a.models.load()?;
    let n = models.len();
    let weights = match (&a.weights, &a.schedule) {
        (Some(w), _) => {
            let w = parse_weights(w)?;
            if w.len() != n {
                return Err(CliError::Usage(format!("{} weights for {n} models", w.len())));
            }
            Weights::Fixed(MixtureWeights::new(w).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        (None, Some(path)) => {
            require_file(path)?;
            let s = WeightSchedule::load(path).map_err(CliError::Usage)?;
            if s.len() != n {
                return Err(CliError::Usage(format!("schedule has {} weights for {n} models", s.len())));
            }
            Weights::Schedule(s)
        }
        (None, None) => Weights::Fixed(MixtureWeights::uniform(n)),
    };

    let members = models
        .into_iter()
        .map(|(name, ck)| EnsembleMember::new(name, ck))
        .collect();
    let mut ens = Ensemble::new(members, MixtureWeights::uniform(n))?;
    ens.set_temperature(a.temperature)?;
    ens.set_threshold(a.threshold);
    ens.prime(&a.seed_text);

    let mut events = match &a.events {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut rng = Rng::new(a.rng_seed);
    let mut emitted = 0u64;
    while emitted < a.chars {
        let pi = match &weights {
            Weights::Fixed(w) => w.clone(),
            Weights::Schedule(s) => MixtureWeights::new(s.at(ens.steps_taken()))?,
        };
        let step_events = match &beam {
            Some(cfg) => {
                let cfg = BeamConfig {
                    commit: cfg.commit.min((a.chars - emitted) as usize),
                    ..cfg.clone()
                };
                beam_step(&mut ens, &pi, &cfg, &mut rng)?.events
            }
            None => vec![ens.step_with(&pi, &mut rng)?],
        };
        for e in &step_events {
            out.write_all(&[e.char])?;
            if let Some(f) = &mut events {
                serde_json::to_writer(&mut *f, e).map_err(|e| CliError::Runtime(e.to_string()))?;
                f.write_all(b"\n")?;
            }
        }
        emitted += step_events.len() as u64;
    }
    out.flush()?;
    if let Some(f) = &mut events {
        f.flush()?;
    }
    Ok(())
}
