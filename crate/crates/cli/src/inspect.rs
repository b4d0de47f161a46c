use std::path::PathBuf;

use clap::Args;
use conductor_core::checkpoint::{self, FORMAT_VERSION, PRECISION};
use conductor_core::lstm::{ModelCheckpoint, GATE_ORDER};
use serde_json::json;

use crate::{require_file, CliError, CliResult};

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    /// Print JSON instead of text
    #[arg(long)]
    pub json: bool,
}

fn shapes(ck: &ModelCheckpoint) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for (k, l) in ck.params.layers.iter().enumerate() {
        out.push((format!("layer{k}.w_x"), l.w_x.rows(), l.w_x.cols()));
        out.push((format!("layer{k}.w_h"), l.w_h.rows(), l.w_h.cols()));
        out.push((format!("layer{k}.b"), l.b.len(), 1));
    }
    out.push(("head.w_y".into(), ck.params.w_y.rows(), ck.params.w_y.cols()));
    out.push(("head.b_y".into(), ck.params.b_y.len(), 1));
    out
}

pub fn run(a: InspectArgs) -> CliResult {
    require_file(&a.checkpoint)?;
    let ck = checkpoint::load(&a.checkpoint)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.checkpoint.display())))?;
    let arch = &ck.architecture;
    let meta = &ck.meta;
    if a.json {
        let summary = json!({
            "file": a.checkpoint.display().to_string(),
            "format_version": FORMAT_VERSION,
            "precision": PRECISION,
            "gate_order": GATE_ORDER,
            "architecture": arch,
            "param_count": ck.params.param_count(),
            "meta": meta,
            "tensors": shapes(&ck).iter().map(|(n, r, c)| json!({"name": n, "rows": r, "cols": c})).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
        return Ok(());
    }
    let layers: Vec<String> = arch.layer_sizes.iter().map(|h| h.to_string()).collect();
    println!("file:        {}", a.checkpoint.display());
    println!("format:      v{FORMAT_VERSION}, {PRECISION}, gates {GATE_ORDER}");
    println!(
        "layers:      {} x [{}] (input {}, output {})",
        arch.layer_sizes.len(),
        layers.join(", "),
        arch.input_dim,
        arch.output_dim
    );
    println!("parameters:  {}", ck.params.param_count());
    println!("corpus:      {}", meta.corpus);
    println!("steps:       {}", meta.training_steps);
    match meta.final_loss {
        Some(l) => println!("final loss:  {l:.4} nats/char"),
        None => println!("final loss:  -"),
    }
    if let Some(seed) = meta.seed {
        println!(
            "seed:        {seed} ({})",
            meta.rng_algorithm.as_deref().unwrap_or("unknown rng")
        );
    }
    println!("tensors:");
    for (name, r, c) in shapes(&ck) {
        println!("  {name:<12} {r} x {c}");
    }
    Ok(())
}
