use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::Args;
use conductor_core::ensemble::{Ensemble, EnsembleMember, MixtureWeights};
use conductor_core::lstm::ModelCheckpoint;
use conductor_core::numeric::Rng;

use crate::{parse_layers, CliError, CliResult, ModelSource};

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub models: ModelSource,
    /// Without checkpoints, benchmark random models of this shape
    #[arg(long, default_value = "128,128")]
    pub layers: String,
    /// Ensemble sizes to measure; models are reused round-robin
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub counts: Vec<usize>,
    /// Characters generated per trial
    #[arg(long, default_value_t = 200)]
    pub steps: u64,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub models: usize,
    pub active: usize,
    pub chars_per_sec: f64,
}

pub fn measure(
    pool: &[(String, Arc<ModelCheckpoint>)],
    k: usize,
    steps: u64,
    trials: usize,
    seed: u64,
) -> conductor_core::Result<BenchRow> {
    let members = (0..k)
        .map(|i| {
            let (name, ck) = &pool[i % pool.len()];
            EnsembleMember::new(format!("{name}#{i}"), ck.clone())
        })
        .collect();
    let mut ens = Ensemble::new(members, MixtureWeights::uniform(k))?;
    ens.prime("The ");
    let mut rng = Rng::new(seed);
    let mut active = 0;
    for _ in 0..10 {
        active = ens.step(&mut rng)?.active.len();
    }
    let mut rates = Vec::with_capacity(trials);
    for _ in 0..trials.max(1) {
        let t = Instant::now();
        for _ in 0..steps {
            ens.step(&mut rng)?;
        }
        rates.push(steps as f64 / t.elapsed().as_secs_f64());
    }
    rates.sort_by(f64::total_cmp);
    Ok(BenchRow {
        models: k,
        active,
        chars_per_sec: rates[rates.len() / 2],
    })
}

pub fn run(a: BenchArgs) -> CliResult {
    if a.counts.iter().any(|&k| k == 0) || a.counts.is_empty() {
        return Err(CliError::Usage("--counts must list positive sizes".into()));
    }
    let pool = if a.models.is_empty() {
        let arch = parse_layers(&a.layers)?;
        (0..4)
            .map(|i| {
                let ck = ModelCheckpoint::random(arch.clone(), a.rng_seed + i)?;
                Ok((format!("random{i}"), Arc::new(ck)))
            })
            .collect::<conductor_core::Result<Vec<_>>>()?
    } else {
        a.models.load()?
    };
    let mut csv = String::from("models,active,chars_per_sec,ms_per_char\n");
    for &k in &a.counts {
        let row = measure(&pool, k, a.steps, a.trials, a.rng_seed)?;
        csv.push_str(&format!(
            "{},{},{:.2},{:.4}\n",
            row.models,
            row.active,
            row.chars_per_sec,
            1e3 / row.chars_per_sec
        ));
    }
    match &a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
