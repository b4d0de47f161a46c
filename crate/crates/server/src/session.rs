//! The generation loop and its fan-out to clients.
//!
//! One thread owns the ensemble. Connection handlers post weights to the
//! ensemble's mailbox and other commands to the loop's channel; the loop
//! broadcasts events and status into bounded per-client queues. A full
//! queue drops its oldest event, never a status or error message.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use conductor_core::beam::beam_step;
use conductor_core::ensemble::{Ensemble, GenerationEvent, WeightsMailbox};
use conductor_core::numeric::Rng;

use crate::config::SessionConfig;
use crate::protocol::{
    DecodeMode, Envelope, ModelInfo, RunState, StatusInfo, ThroughputStats, WireEvent, WireMessage,
};
use crate::ServerError;

/// Steps kept for throughput statistics.
const STATS_WINDOW: usize = 64;
/// Events between unsolicited status broadcasts.
const STATUS_EVERY: u64 = 64;

#[derive(Debug, Default)]
struct QueueState {
    items: VecDeque<Arc<Envelope>>,
    closed: bool,
    dropped_events: u64,
}

/// Outbound messages for one client.
#[derive(Debug)]
pub struct ClientQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
    capacity: usize,
}

impl ClientQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::default(),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&self, envelope: Arc<Envelope>) {
        let mut s = self.state.lock().unwrap();
        if s.closed {
            return;
        }
        let is_event = matches!(envelope.message, WireMessage::Event(_));
        if s.items.len() >= self.capacity {
            let oldest = s
                .items
                .iter()
                .position(|e| matches!(e.message, WireMessage::Event(_)));
            match oldest {
                Some(i) => {
                    s.items.remove(i);
                    s.dropped_events += 1;
                }
                None if is_event => {
                    s.dropped_events += 1;
                    return;
                }
                None => {}
            }
        }
        s.items.push_back(envelope);
        self.ready.notify_one();
    }

    /// Waits up to `timeout` for the next message. `None` on timeout or
    /// once the queue is closed and drained.
    pub fn pop(&self, timeout: Duration) -> Option<Arc<Envelope>> {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock().unwrap();
        loop {
            if let Some(e) = s.items.pop_front() {
                return Some(e);
            }
            let now = Instant::now();
            if s.closed || now >= deadline {
                return None;
            }
            s = self.ready.wait_timeout(s, deadline - now).unwrap().0;
        }
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped_events(&self) -> u64 {
        self.state.lock().unwrap().dropped_events
    }
}

#[derive(Debug, Default)]
struct Hub {
    clients: Mutex<Vec<Weak<ClientQueue>>>,
}

impl Hub {
    fn subscribe(&self, capacity: usize) -> Arc<ClientQueue> {
        let q = Arc::new(ClientQueue::new(capacity));
        self.clients.lock().unwrap().push(Arc::downgrade(&q));
        q
    }

    fn broadcast(&self, envelope: Envelope) {
        let envelope = Arc::new(envelope);
        let mut clients = self.clients.lock().unwrap();
        clients.retain(|c| match c.upgrade() {
            Some(q) if !q.is_closed() => {
                q.push(envelope.clone());
                true
            }
            _ => false,
        });
    }
}

#[derive(Debug)]
enum Command {
    Prime(String),
    Pause,
    Resume,
    Reset,
    SetTemperature(f64),
    SetDecodeMode(DecodeMode),
    Stop,
}

#[derive(Debug)]
struct Shared {
    id: String,
    mailbox: WeightsMailbox,
    commands: Mutex<Sender<(Command, Option<u64>)>>,
    hub: Hub,
    models: Vec<ModelInfo>,
    control_seq: AtomicU64,
    status: Mutex<StatusInfo>,
}

/// Cloneable access to a running session for connection handlers.
#[derive(Debug, Clone)]
pub struct SessionHandle {
    shared: Arc<Shared>,
}

impl SessionHandle {
    pub fn id(&self) -> &str {
        &self.shared.id
    }

    pub fn models(&self) -> &[ModelInfo] {
        &self.shared.models
    }

    pub fn subscribe(&self, capacity: usize) -> Arc<ClientQueue> {
        self.shared.hub.subscribe(capacity)
    }

    pub fn status(&self) -> StatusInfo {
        let mut s = self.shared.status.lock().unwrap().clone();
        s.weights = self.shared.mailbox.snapshot().into();
        s
    }

    /// Wraps a server-originated control message.
    pub fn control(&self, message: WireMessage) -> Envelope {
        let seq = self.shared.control_seq.fetch_add(1, Ordering::Relaxed);
        Envelope::new(self.shared.id.clone(), seq, message)
    }

    /// Validates and posts new weights; the next step picks them up.
    pub fn set_weights(&self, weights: Vec<f64>) -> Result<(), String> {
        self.shared.mailbox.set(weights).map_err(|e| e.to_string())
    }

    fn send(&self, cmd: Command, ack: Option<u64>) -> bool {
        self.shared.commands.lock().unwrap().send((cmd, ack)).is_ok()
    }

    pub fn pause(&self) -> bool {
        self.send(Command::Pause, None)
    }

    pub fn resume(&self) -> bool {
        self.send(Command::Resume, None)
    }

    pub fn greeting(&self) -> [Envelope; 2] {
        [
            self.control(WireMessage::ModelList {
                models: self.shared.models.clone(),
            }),
            self.control(WireMessage::Status(self.status())),
        ]
    }

    /// Handles one client message, answering on `reply` when the answer
    /// concerns only that client.
    pub fn handle(&self, envelope: Envelope, reply: &ClientQueue) {
        let seq = envelope.seq;
        let err = |code: &str, msg: String| {
            reply.push(Arc::new(self.control(WireMessage::error(code, msg, Some(seq)))));
        };
        if !envelope.session.is_empty() && envelope.session != self.shared.id {
            return err("wrong_session", format!("no session {:?}", envelope.session));
        }
        let cmd = match envelope.message {
            WireMessage::SetWeights { weights } => {
                match self.set_weights(weights) {
                    Ok(()) => {
                        let mut status = self.status();
                        status.ack = Some(seq);
                        reply.push(Arc::new(self.control(WireMessage::Status(status))));
                    }
                    Err(e) => err("invalid_weights", e),
                }
                return;
            }
            WireMessage::ListModels => {
                reply.push(Arc::new(self.control(WireMessage::ModelList {
                    models: self.shared.models.clone(),
                })));
                return;
            }
            WireMessage::Prime { text } => Command::Prime(text),
            WireMessage::Pause => Command::Pause,
            WireMessage::Resume => Command::Resume,
            WireMessage::Reset => Command::Reset,
            WireMessage::SetTemperature { temperature } => {
                if !(temperature >= 0.0 && temperature.is_finite()) {
                    return err("invalid_argument", format!("temperature {temperature}"));
                }
                Command::SetTemperature(temperature)
            }
            WireMessage::SetDecodeMode { mode } => {
                if let DecodeMode::Beam(b) = &mode {
                    if let Err(e) = b.validate() {
                        return err("invalid_argument", e.to_string());
                    }
                }
                Command::SetDecodeMode(mode)
            }
            other => {
                return err(
                    "unexpected_type",
                    format!("{} is sent by the server only", other.type_tag()),
                )
            }
        };
        if !self.send(cmd, Some(seq)) {
            err("stopped", "session has stopped".into());
        }
    }
}

#[derive(Debug, Default)]
struct Stats {
    steps: VecDeque<(Instant, Duration)>,
    total: u64,
}

impl Stats {
    fn record(&mut self, at: Instant, took: Duration, chars: u64) {
        if self.steps.len() == STATS_WINDOW {
            self.steps.pop_front();
        }
        self.steps.push_back((at, took));
        self.total += chars;
    }

    fn snapshot(&self, active_models: usize) -> ThroughputStats {
        let mut ms: Vec<f64> = self.steps.iter().map(|(_, d)| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let pct = |q: f64| {
            if ms.is_empty() {
                0.0
            } else {
                ms[((ms.len() - 1) as f64 * q).round() as usize]
            }
        };
        let chars_per_sec = match (self.steps.front(), self.steps.back()) {
            (Some((a, _)), Some((b, _))) if b > a => {
                (self.steps.len() - 1) as f64 / (*b - *a).as_secs_f64()
            }
            _ => 0.0,
        };
        ThroughputStats {
            chars_per_sec,
            latency_p50_ms: pct(0.5),
            latency_p95_ms: pct(0.95),
            latency_max_ms: ms.last().copied().unwrap_or(0.0),
            active_models,
            steps: self.total,
        }
    }
}

pub struct Session {
    handle: SessionHandle,
    thread: Option<JoinHandle<Result<(), ServerError>>>,
}

impl Session {
    pub fn start(
        mut ensemble: Ensemble,
        config: SessionConfig,
        models: Vec<ModelInfo>,
    ) -> Result<Self, ServerError> {
        config.validate()?;
        if models.len() != ensemble.len() {
            return Err(ServerError::Config("model list does not match ensemble".into()));
        }
        if let Some(w) = &config.weights {
            ensemble.set_weights(w.clone())?;
        }
        ensemble.set_temperature(config.temperature)?;
        ensemble.set_wall_clock(config.timestamps);
        if let Some(seed) = &config.seed_text {
            ensemble.prime(seed);
        }
        let transcript = match &config.transcript {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        let (tx, rx) = mpsc::channel();
        let state = if config.start_paused { RunState::Paused } else { RunState::Running };
        let shared = Arc::new(Shared {
            id: config.id.clone(),
            mailbox: ensemble.mailbox(),
            commands: Mutex::new(tx),
            hub: Hub::default(),
            models,
            control_seq: AtomicU64::new(0),
            status: Mutex::new(StatusInfo {
                state,
                weights: ensemble.weights().into(),
                temperature: config.temperature,
                decode_mode: config.decode.clone(),
                step: 0,
                ack: None,
                throughput: None,
            }),
        });
        let handle = SessionHandle { shared };
        let mut gen = Generator {
            handle: handle.clone(),
            ensemble,
            rng: Rng::new(config.rng_seed),
            decode: config.decode.clone(),
            state,
            interval: (config.chars_per_sec > 0.0)
                .then(|| Duration::from_secs_f64(1.0 / config.chars_per_sec)),
            max_chars: config.max_chars,
            emitted: 0,
            transcript,
            stats: Stats::default(),
            last_active: 0,
        };
        let thread = thread::Builder::new()
            .name(format!("session-{}", config.id))
            .spawn(move || gen.run(rx))?;
        Ok(Self {
            handle,
            thread: Some(thread),
        })
    }

    pub fn handle(&self) -> SessionHandle {
        self.handle.clone()
    }

    /// Blocks until the loop ends on its own, e.g. after `max_chars`.
    pub fn wait(mut self) -> Result<(), ServerError> {
        self.thread
            .take()
            .expect("joined once")
            .join()
            .map_err(|_| ServerError::Config("generation thread panicked".into()))?
    }

    pub fn stop(self) -> Result<(), ServerError> {
        self.handle.send(Command::Stop, None);
        self.wait()
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.handle.send(Command::Stop, None);
            let _ = t.join();
        }
    }
}

struct Generator {
    handle: SessionHandle,
    ensemble: Ensemble,
    rng: Rng,
    decode: DecodeMode,
    state: RunState,
    interval: Option<Duration>,
    max_chars: Option<u64>,
    emitted: u64,
    transcript: Option<File>,
    stats: Stats,
    last_active: usize,
}

impl Generator {
    fn broadcast_status(&self, ack: Option<u64>) {
        let mut status = self.publish_status();
        status.ack = ack;
        self.handle
            .shared
            .hub
            .broadcast(self.handle.control(WireMessage::Status(status)));
    }

    fn publish_status(&self) -> StatusInfo {
        let status = StatusInfo {
            state: self.state,
            weights: self.ensemble.weights().into(),
            temperature: self.ensemble.temperature(),
            decode_mode: self.decode.clone(),
            step: self.ensemble.steps_taken(),
            ack: None,
            throughput: Some(self.stats.snapshot(self.last_active)),
        };
        *self.handle.shared.status.lock().unwrap() = status.clone();
        status
    }

    fn apply(&mut self, cmd: Command, ack: Option<u64>, next_due: &mut Instant) {
        match cmd {
            Command::Prime(text) => self.ensemble.prime(&text),
            Command::Pause => self.state = RunState::Paused,
            Command::Resume => {
                if self.state == RunState::Paused {
                    self.state = RunState::Running;
                    *next_due = Instant::now();
                }
            }
            Command::Reset => self.ensemble.reset(),
            Command::SetTemperature(t) => {
                // validated by the handler
                let _ = self.ensemble.set_temperature(t);
            }
            Command::SetDecodeMode(mode) => self.decode = mode,
            Command::Stop => self.state = RunState::Stopped,
        }
        self.broadcast_status(ack);
    }

    fn step(&mut self) -> conductor_core::Result<Vec<GenerationEvent>> {
        let pi = self.ensemble.weights();
        match &self.decode {
            DecodeMode::Sample => Ok(vec![self.ensemble.step_with(&pi, &mut self.rng)?]),
            DecodeMode::Beam(cfg) => {
                let mut cfg = cfg.clone();
                if let Some(max) = self.max_chars {
                    cfg.commit = cfg.commit.min((max - self.emitted) as usize);
                }
                Ok(beam_step(&mut self.ensemble, &pi, &cfg, &mut self.rng)?.events)
            }
        }
    }

    fn run(&mut self, rx: Receiver<(Command, Option<u64>)>) -> Result<(), ServerError> {
        let mut next_due = Instant::now();
        loop {
            let received = match self.state {
                RunState::Stopped => break,
                RunState::Paused => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
                RunState::Running => {
                    rx.recv_timeout(next_due.saturating_duration_since(Instant::now()))
                }
            };
            match received {
                Ok((cmd, ack)) => {
                    self.apply(cmd, ack, &mut next_due);
                    continue;
                }
                Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {}
            }

            let started = Instant::now();
            let events = match self.step() {
                Ok(events) => events,
                Err(e) => {
                    self.state = RunState::Paused;
                    self.handle.shared.hub.broadcast(
                        self.handle.control(WireMessage::error("model_error", e.to_string(), None)),
                    );
                    self.broadcast_status(None);
                    continue;
                }
            };
            let done = Instant::now();
            self.stats.record(done, done - started, events.len() as u64);
            for e in &events {
                self.last_active = e.active.len();
                if let Some(f) = &mut self.transcript {
                    f.write_all(&[e.char])?;
                }
                self.handle.shared.hub.broadcast(Envelope::new(
                    self.handle.shared.id.clone(),
                    e.step,
                    WireMessage::Event(WireEvent::from(e)),
                ));
                self.emitted += 1;
                if self.emitted % STATUS_EVERY == 0 {
                    self.broadcast_status(None);
                }
            }
            if let Some(f) = &mut self.transcript {
                f.flush()?;
            }
            if self.max_chars.is_some_and(|m| self.emitted >= m) {
                self.state = RunState::Stopped;
                self.broadcast_status(None);
                break;
            }
            if let Some(iv) = self.interval {
                next_due = (next_due + iv * events.len() as u32).max(done);
            }
        }
        self.state = RunState::Stopped;
        self.publish_status();
        Ok(())
    }
}
