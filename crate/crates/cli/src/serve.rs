use std::path::PathBuf;

use clap::Args;
use conductor_server::config::ServerConfig;
use conductor_server::Server;

use crate::{parse_weights, require_file, CliError, CliResult};

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML configuration; flags below override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// TCP address for the stream protocol
    #[arg(long)]
    pub listen: Option<String>,
    /// UDP address for OSC weight messages
    #[arg(long, conflicts_with = "no_osc")]
    pub osc: Option<String>,
    #[arg(long)]
    pub no_osc: bool,
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Generation pace; 0 runs unthrottled
    #[arg(long)]
    pub chars_per_sec: Option<f64>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
    #[arg(long)]
    pub seed_text: Option<String>,
    /// Stop after this many characters
    #[arg(long)]
    pub max_chars: Option<u64>,
    /// Append generated text to this file
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Wait for a Resume message before generating
    #[arg(long)]
    pub paused: bool,
}

pub fn run(a: ServeArgs) -> CliResult {
    let mut config = match &a.config {
        Some(p) => {
            require_file(p)?;
            ServerConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => {
            if a.manifest.is_none() {
                return Err(CliError::Usage("give --config or --manifest".into()));
            }
            ServerConfig::default()
        }
    };
    if let Some(m) = a.manifest {
        config.manifest = m;
    }
    require_file(&config.manifest)?;
    if let Some(l) = a.listen {
        config.listen = l;
    }
    if a.no_osc {
        config.osc = None;
    } else if let Some(o) = a.osc {
        config.osc = Some(o);
    }
    let s = &mut config.session;
    if let Some(w) = &a.weights {
        s.weights = Some(parse_weights(w)?);
    }
    if let Some(t) = a.temperature {
        s.temperature = t;
    }
    if let Some(c) = a.chars_per_sec {
        s.chars_per_sec = c;
    }
    if let Some(r) = a.rng_seed {
        s.rng_seed = r;
    }
    if a.seed_text.is_some() {
        s.seed_text = a.seed_text;
    }
    if a.max_chars.is_some() {
        s.max_chars = a.max_chars;
    }
    if a.transcript.is_some() {
        s.transcript = a.transcript;
    }
    s.start_paused |= a.paused;
    s.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let server = Server::start(&config)?;
    match server.osc() {
        Some(o) => eprintln!("listening on {} (osc {})", server.tcp_addr(), o.local_addr()),
        None => eprintln!("listening on {}", server.tcp_addr()),
    }
    server.wait()?;
    Ok(())
}
