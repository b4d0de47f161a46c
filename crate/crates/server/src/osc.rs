//! OSC input: UDP datagrams addressed to `/mix/weights` carrying one
//! number per model. Packets that don't fit are dropped and counted.

use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rosc::{OscMessage, OscPacket, OscType};

pub const WEIGHTS_ADDRESS: &str = "/mix/weights";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OscError {
    #[error("undecodable packet: {0}")]
    Decode(String),
    #[error("no {WEIGHTS_ADDRESS} message in packet")]
    NoWeights,
    #[error("argument {0} is not a number")]
    NotNumeric(usize),
}

fn weights_of(msg: &OscMessage) -> Result<Vec<f64>, OscError> {
    msg.args
        .iter()
        .enumerate()
        .map(|(i, a)| match a {
            OscType::Float(x) => Ok(*x as f64),
            OscType::Double(x) => Ok(*x),
            OscType::Int(x) => Ok(*x as f64),
            OscType::Long(x) => Ok(*x as f64),
            _ => Err(OscError::NotNumeric(i)),
        })
        .collect()
}

fn last_weights(packet: &OscPacket) -> Result<Option<Vec<f64>>, OscError> {
    match packet {
        OscPacket::Message(m) if m.addr == WEIGHTS_ADDRESS => weights_of(m).map(Some),
        OscPacket::Message(_) => Ok(None),
        OscPacket::Bundle(b) => {
            let mut last = None;
            for p in &b.content {
                if let Some(w) = last_weights(p)? {
                    last = Some(w);
                }
            }
            Ok(last)
        }
    }
}

/// Extracts the weight vector from a datagram. In a bundle the last
/// weights message wins.
pub fn parse_weights(datagram: &[u8]) -> Result<Vec<f64>, OscError> {
    let (_, packet) =
        rosc::decoder::decode_udp(datagram).map_err(|e| OscError::Decode(format!("{e:?}")))?;
    last_weights(&packet)?.ok_or(OscError::NoWeights)
}

/// Encodes `weights` as single-precision floats, as most controllers send.
pub fn encode_weights(weights: &[f32]) -> Vec<u8> {
    rosc::encoder::encode(&OscPacket::Message(OscMessage {
        addr: WEIGHTS_ADDRESS.to_string(),
        args: weights.iter().map(|&w| OscType::Float(w)).collect(),
    }))
    .expect("message encodes")
}

#[derive(Debug, Default)]
pub struct OscCounters {
    pub accepted: AtomicU64,
    pub dropped: AtomicU64,
}

pub struct OscListener {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    pub counters: Arc<OscCounters>,
    thread: Option<JoinHandle<()>>,
}

impl OscListener {
    /// Binds `addr` and hands each parsed weight vector to `apply`, which
    /// returns false to reject it.
    pub fn spawn(
        addr: &str,
        apply: impl Fn(Vec<f64>) -> bool + Send + 'static,
    ) -> std::io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(100)))?;
        let addr = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let counters = Arc::new(OscCounters::default());
        let thread = {
            let stop = stop.clone();
            let counters = counters.clone();
            thread::Builder::new().name("osc".into()).spawn(move || {
                let mut buf = [0u8; rosc::decoder::MTU];
                while !stop.load(Ordering::Relaxed) {
                    let n = match socket.recv(&mut buf) {
                        Ok(n) => n,
                        Err(_) => continue,
                    };
                    let ok = parse_weights(&buf[..n]).map(&apply).unwrap_or(false);
                    let counter = if ok { &counters.accepted } else { &counters.dropped };
                    counter.fetch_add(1, Ordering::Relaxed);
                }
            })?
        };
        Ok(Self {
            addr,
            stop,
            counters,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn dropped(&self) -> u64 {
        self.counters.dropped.load(Ordering::Relaxed)
    }

    pub fn accepted(&self) -> u64 {
        self.counters.accepted.load(Ordering::Relaxed)
    }
}

impl Drop for OscListener {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
