//! Model manifests (JSON) and server configuration (TOML).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use conductor_core::checkpoint;
use conductor_core::ensemble::{Ensemble, EnsembleMember, MixtureWeights};
use conductor_core::lstm::ModelCheckpoint;
use serde::{Deserialize, Serialize};

use crate::protocol::{DecodeMode, ModelInfo};
use crate::ServerError;

pub const DEFAULT_CHARS_PER_SEC: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Relative paths are resolved against the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub models: Vec<ModelSpec>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut manifest.models {
            if m.path.is_relative() {
                m.path = base.join(&m.path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        if self.models.is_empty() {
            return Err(ServerError::Config("manifest lists no models".into()));
        }
        let mut seen = HashSet::new();
        for m in &self.models {
            if !seen.insert(&m.name) {
                return Err(ServerError::Config(format!("duplicate model name {:?}", m.name)));
            }
        }
        Ok(())
    }

    pub fn load_models(&self) -> Result<Vec<(String, Arc<ModelCheckpoint>)>, ServerError> {
        self.models
            .iter()
            .map(|m| {
                let ck = checkpoint::load(&m.path).map_err(|e| ServerError::Model {
                    name: m.name.clone(),
                    source: e,
                })?;
                Ok((m.name.clone(), Arc::new(ck)))
            })
            .collect()
    }
}

pub fn model_infos(models: &[(String, Arc<ModelCheckpoint>)]) -> Vec<ModelInfo> {
    models
        .iter()
        .enumerate()
        .map(|(index, (name, ck))| ModelInfo {
            index,
            name: name.clone(),
            layer_sizes: ck.architecture.layer_sizes.clone(),
            param_count: ck.params.param_count(),
            corpus: ck.meta.corpus.clone(),
        })
        .collect()
}

pub fn build_ensemble(
    models: &[(String, Arc<ModelCheckpoint>)],
    weights: Option<&[f64]>,
) -> Result<Ensemble, ServerError> {
    let members = models
        .iter()
        .map(|(name, ck)| EnsembleMember::new(name.clone(), ck.clone()))
        .collect();
    let weights = match weights {
        Some(w) => MixtureWeights::new(w.to_vec())?,
        None => MixtureWeights::uniform(models.len()),
    };
    Ok(Ensemble::new(members, weights)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub id: String,
    /// Initial weights; uniform when absent.
    pub weights: Option<Vec<f64>>,
    pub temperature: f64,
    pub decode: DecodeMode,
    pub rng_seed: u64,
    /// Generation pace; 0 runs unthrottled.
    pub chars_per_sec: f64,
    pub seed_text: Option<String>,
    /// Stop after this many characters.
    pub max_chars: Option<u64>,
    pub start_paused: bool,
    /// Append generated text to this file.
    pub transcript: Option<PathBuf>,
    /// Stamp events with wall-clock milliseconds.
    pub timestamps: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            id: "main".into(),
            weights: None,
            temperature: 1.0,
            decode: DecodeMode::Sample,
            rng_seed: 0,
            chars_per_sec: DEFAULT_CHARS_PER_SEC,
            seed_text: None,
            max_chars: None,
            start_paused: false,
            transcript: None,
            timestamps: true,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ServerError::Config(format!("temperature {}", self.temperature)));
        }
        if !(self.chars_per_sec >= 0.0 && self.chars_per_sec.is_finite()) {
            return Err(ServerError::Config(format!("chars_per_sec {}", self.chars_per_sec)));
        }
        if let DecodeMode::Beam(b) = &self.decode {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    /// OSC datagram listener; disabled when absent.
    pub osc: Option<String>,
    /// Pending frames per client before events are dropped.
    pub client_queue: usize,
    pub manifest: PathBuf,
    pub session: SessionConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7400".into(),
            osc: Some("127.0.0.1:7401".into()),
            client_queue: 256,
            manifest: "models.json".into(),
            session: SessionConfig::default(),
        }
    }
}

impl ServerConfig {
    /// Reads a TOML file. A relative manifest path is taken relative to
    /// the config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        let mut config: ServerConfig = toml::from_str(&text)
            .map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        if config.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                config.manifest = dir.join(&config.manifest);
            }
        }
        Ok(config)
    }
}
