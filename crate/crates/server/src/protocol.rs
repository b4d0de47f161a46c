//! Wire format: each frame is a 4-byte big-endian payload length followed
//! by a UTF-8 JSON object. Every object carries the schema version `v`,
//! the session id, a sequence number and a `type` tag. See PROTOCOL.md.

use std::io::{self, Read, Write};

use conductor_core::beam::BeamConfig;
use conductor_core::ensemble::GenerationEvent;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME_LEN: usize = 1 << 20;
/// Entries kept per model row in an event.
pub const TOP_K: usize = 16;

pub const MESSAGE_TYPES: [&str; 12] = [
    "set_weights",
    "prime",
    "pause",
    "resume",
    "reset",
    "set_temperature",
    "set_decode_mode",
    "list_models",
    "model_list",
    "event",
    "status",
    "error",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    FrameTooLarge(usize),
    #[error("connection closed inside a frame")]
    Truncated,
    #[error("payload is not valid JSON: {0}")]
    Json(String),
    #[error("missing or invalid field `{0}`")]
    MissingField(&'static str),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u64),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("malformed {kind} message: {detail}")]
    Malformed { kind: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Sample,
    Beam(BeamConfig),
}

impl Default for DecodeMode {
    fn default() -> Self {
        Self::Sample
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub index: usize,
    pub name: String,
    pub layer_sizes: Vec<usize>,
    pub param_count: usize,
    pub corpus: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub char: u8,
    pub p: f64,
}

/// A model's distribution cut down to its most likely characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRow {
    pub model: usize,
    pub top: Vec<TopEntry>,
    /// Probability mass outside `top`.
    pub residual: f64,
}

impl WireRow {
    pub fn from_dist(model: usize, dist: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..dist.len()).filter(|&c| dist[c] > 0.0).collect();
        idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        let (kept, rest) = idx.split_at(idx.len().min(TOP_K));
        Self {
            model,
            top: kept
                .iter()
                .map(|&c| TopEntry { char: c as u8, p: dist[c] })
                .collect(),
            residual: rest.iter().map(|&c| dist[c]).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEvent {
    pub step: u64,
    pub char: u8,
    pub rho: Vec<f64>,
    pub rows: Vec<WireRow>,
    pub weights: Vec<f64>,
    pub active: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

impl From<&GenerationEvent> for WireEvent {
    fn from(e: &GenerationEvent) -> Self {
        Self {
            step: e.step,
            char: e.char,
            rho: e.rho.clone(),
            rows: e.rows.iter().map(|r| WireRow::from_dist(r.model, &r.dist)).collect(),
            weights: e.weights.clone(),
            active: e.active.clone(),
            timestamp_ms: e.timestamp_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Paused,
    Stopped,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputStats {
    /// Characters per second over the recent window.
    pub chars_per_sec: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub latency_max_ms: f64,
    pub active_models: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusInfo {
    pub state: RunState,
    pub weights: Vec<f64>,
    pub temperature: f64,
    pub decode_mode: DecodeMode,
    pub step: u64,
    /// Sequence number of the client message this status acknowledges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ack: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throughput: Option<ThroughputStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    SetWeights { weights: Vec<f64> },
    Prime { text: String },
    Pause,
    Resume,
    Reset,
    SetTemperature { temperature: f64 },
    SetDecodeMode { mode: DecodeMode },
    ListModels,
    ModelList { models: Vec<ModelInfo> },
    Event(WireEvent),
    Status(StatusInfo),
    Error {
        code: String,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ref_seq: Option<u64>,
    },
}

impl WireMessage {
    pub fn type_tag(&self) -> &'static str {
        match self {
            Self::SetWeights { .. } => "set_weights",
            Self::Prime { .. } => "prime",
            Self::Pause => "pause",
            Self::Resume => "resume",
            Self::Reset => "reset",
            Self::SetTemperature { .. } => "set_temperature",
            Self::SetDecodeMode { .. } => "set_decode_mode",
            Self::ListModels => "list_models",
            Self::ModelList { .. } => "model_list",
            Self::Event(_) => "event",
            Self::Status(_) => "status",
            Self::Error { .. } => "error",
        }
    }

    pub fn error(code: &str, message: impl Into<String>, ref_seq: Option<u64>) -> Self {
        Self::Error {
            code: code.into(),
            message: message.into(),
            ref_seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub session: String,
    pub seq: u64,
    #[serde(flatten)]
    pub message: WireMessage,
}

impl Envelope {
    pub fn new(session: impl Into<String>, seq: u64, message: WireMessage) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            session: session.into(),
            seq,
            message,
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serializes")
    }

    pub fn to_frame(&self) -> Vec<u8> {
        frame(&self.to_json())
    }
}

pub fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Parses one JSON payload.
pub fn parse_payload(payload: &[u8]) -> Result<Envelope, ProtocolError> {
    let value: Value =
        serde_json::from_slice(payload).map_err(|e| ProtocolError::Json(e.to_string()))?;
    let obj = value.as_object().ok_or(ProtocolError::MissingField("type"))?;
    let v = obj
        .get("v")
        .and_then(Value::as_u64)
        .ok_or(ProtocolError::MissingField("v"))?;
    if v != PROTOCOL_VERSION as u64 {
        return Err(ProtocolError::UnsupportedVersion(v));
    }
    let kind = obj
        .get("type")
        .and_then(Value::as_str)
        .ok_or(ProtocolError::MissingField("type"))?;
    if !MESSAGE_TYPES.contains(&kind) {
        return Err(ProtocolError::UnknownType(kind.to_string()));
    }
    if !obj.get("session").is_some_and(Value::is_string) {
        return Err(ProtocolError::MissingField("session"));
    }
    if !obj.get("seq").is_some_and(Value::is_u64) {
        return Err(ProtocolError::MissingField("seq"));
    }
    let kind = kind.to_string();
    serde_json::from_value(value).map_err(|e| ProtocolError::Malformed {
        kind,
        detail: e.to_string(),
    })
}

/// Splits the first complete frame off `buf`. `Ok(None)` means more bytes
/// are needed. On a payload error the frame is still consumed, so the
/// caller can report it and carry on with the next one.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Result<Envelope, ProtocolError>, usize)>, ProtocolError> {
    let Some(len) = buf.get(..4) else {
        return Ok(None);
    };
    let len = u32::from_be_bytes(len.try_into().unwrap()) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    match buf.get(4..4 + len) {
        Some(payload) => Ok(Some((parse_payload(payload), 4 + len))),
        None => Ok(None),
    }
}

/// Reads one frame's payload. `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Result<Vec<u8>, ProtocolError>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Ok(Some(Err(ProtocolError::Truncated))),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Ok(Some(Err(ProtocolError::FrameTooLarge(len))));
    }
    let mut payload = vec![0u8; len];
    match r.read_exact(&mut payload) {
        Ok(()) => Ok(Some(Ok(payload))),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(Some(Err(ProtocolError::Truncated))),
        Err(e) => Err(e),
    }
}

pub fn write_frame(w: &mut impl Write, envelope: &Envelope) -> io::Result<()> {
    w.write_all(&envelope.to_frame())?;
    w.flush()
}
