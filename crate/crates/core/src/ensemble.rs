//! The generation loop: every active model reads the same character
//! stream, their next-character distributions are mixed by the live
//! mixture weights, a character is sampled from the mixture and fed back.
//!
//! Models whose normalized weight is at or below [`ACTIVE_THRESHOLD`] are
//! not run. When such a model becomes active again, the characters it
//! missed are replayed through it from the state it was frozen in, taken
//! from the [`ReplayBuffer`]; this is exact while it missed at most
//! [`REPLAY_CAPACITY`] characters. After longer absences the model is
//! rebuilt from a fresh state over the whole buffer, which only
//! approximates its continuous-feeding state.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, CharIndex, ALPHABET_SIZE, MAX_WINDOW};
use crate::error::{Error, Result};
use crate::lstm::{LstmState, ModelCheckpoint};
use crate::numeric::{argmax, sample_categorical, Rng, Vector};

/// Models run only when their normalized weight is strictly above this.
pub const ACTIVE_THRESHOLD: f64 = 0.05;

pub const REPLAY_CAPACITY: usize = MAX_WINDOW;

/// Implicit first input when generation starts without priming.
pub const START_CHAR: CharIndex = b'\n';

/// Per-model mixture weights: nonnegative and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("empty weight vector".into()));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(Error::InvalidWeights(format!("weight {i} is {w}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|w| w * k).collect())
    }
}

impl TryFrom<Vec<f64>> for MixtureWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MixtureWeights> for Vec<f64> {
    fn from(w: MixtureWeights) -> Self {
        w.0
    }
}

/// One row per registered model; `None` marks a model that was not run
/// this step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionalMatrix {
    pub rows: Vec<Option<Vector>>,
}

impl ConditionalMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            rows: vec![None; n],
        }
    }

    pub fn from_rows(rows: Vec<Vector>) -> Self {
        Self {
            rows: rows.into_iter().map(Some).collect(),
        }
    }
}

/// Models whose normalized weight exceeds `threshold`. Falls back to the
/// heaviest model when none does.
pub fn active_set(pi: &MixtureWeights, threshold: f64) -> Result<Vec<usize>> {
    let total = pi.total();
    if !(total > 0.0) {
        return Err(Error::ZeroActiveWeight);
    }
    let active: Vec<usize> = pi
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w / total > threshold)
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        Ok(vec![argmax(pi.as_slice())])
    } else {
        Ok(active)
    }
}

fn active_rows<'a>(
    omega: &'a ConditionalMatrix,
    pi: &MixtureWeights,
    active: &[usize],
) -> Result<Vec<(f64, &'a Vector)>> {
    if omega.rows.len() != pi.len() {
        return Err(Error::DimensionMismatch {
            context: "weights vs matrix rows",
            expected: omega.rows.len(),
            actual: pi.len(),
        });
    }
    active
        .iter()
        .map(|&i| {
            let row = omega
                .rows
                .get(i)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::InvalidDistribution(format!("row {i} not populated")))?;
            if row.len() != ALPHABET_SIZE {
                return Err(Error::DimensionMismatch {
                    context: "distribution row",
                    expected: ALPHABET_SIZE,
                    actual: row.len(),
                });
            }
            Ok((pi.as_slice()[i], row))
        })
        .collect()
}

/// Unnormalized mixture `Σ_{i∈active} π_i · y_i`.
pub fn mix_numerator(
    omega: &ConditionalMatrix,
    pi: &MixtureWeights,
    active: &[usize],
) -> Result<Vector> {
    let mut acc = Vector::zeros(ALPHABET_SIZE);
    for (w, row) in active_rows(omega, pi, active)? {
        for (a, y) in acc.iter_mut().zip(row.iter()) {
            *a += w * y;
        }
    }
    Ok(acc)
}

/// Joint distribution: the π-weighted sum of the active rows, divided by
/// its L1 norm. A single active row is returned unchanged.
pub fn mix(omega: &ConditionalMatrix, pi: &MixtureWeights, active: &[usize]) -> Result<Vector> {
    let rows = active_rows(omega, pi, active)?;
    let total: f64 = rows.iter().map(|(w, _)| w).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroActiveWeight);
    }
    if let [(_, row)] = rows[..] {
        return Ok(row.clone());
    }
    let mut acc = Vector::zeros(ALPHABET_SIZE);
    for (w, row) in rows {
        let w = w / total;
        for (a, y) in acc.iter_mut().zip(row.iter()) {
            *a += w * y;
        }
    }
    let norm = acc.sum();
    if !(norm > 0.0) {
        return Err(Error::InvalidDistribution("mixture has no mass".into()));
    }
    for a in acc.iter_mut() {
        *a /= norm;
    }
    Ok(acc)
}

/// Sharpens (`t < 1`) or flattens (`t > 1`) a distribution by scaling its
/// log-probabilities by `1/t`. Zero entries stay zero; `t = 1` is the
/// identity and `t = 0` collapses onto the argmax.
pub fn apply_temperature(p: &[f64], t: f64) -> Result<Vector> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature {t}")));
    }
    if t == 1.0 {
        return Ok(p.to_vec().into());
    }
    let mut out = vec![0.0; p.len()];
    if t == 0.0 {
        out[argmax(p)] = 1.0;
        return Ok(out.into());
    }
    let scaled: Vec<Option<f64>> = p
        .iter()
        .map(|&x| (x > 0.0).then(|| x.ln() / t))
        .collect();
    let max = scaled
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, s) in out.iter_mut().zip(&scaled) {
        if let Some(s) = s {
            *o = (s - max).exp();
            total += *o;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out.into())
}

/// The most recent generated or primed characters, oldest first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayBuffer {
    chars: VecDeque<CharIndex>,
    /// Characters pushed since the last reset.
    total: u64,
}

impl ReplayBuffer {
    pub fn push(&mut self, c: CharIndex) {
        if self.chars.len() == REPLAY_CAPACITY {
            self.chars.pop_front();
        }
        self.chars.push_back(c);
        self.total += 1;
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn to_vec(&self) -> Vec<CharIndex> {
        self.chars.iter().copied().collect()
    }

    /// Characters at absolute positions `from..total`, if still held.
    fn since(&self, from: u64) -> Option<Vec<CharIndex>> {
        let oldest = self.total - self.chars.len() as u64;
        (from >= oldest).then(|| self.chars.iter().skip((from - oldest) as usize).copied().collect())
    }
}

/// Shared handle through which other threads post new weights; the
/// generation loop reads it once per step.
#[derive(Debug, Clone)]
pub struct WeightsMailbox {
    inner: Arc<Mutex<MixtureWeights>>,
}

impl WeightsMailbox {
    pub fn new(initial: MixtureWeights) -> Self {
        Self {
            inner: Arc::new(Mutex::new(initial)),
        }
    }

    /// Replaces the weights; invalid updates leave the previous ones.
    pub fn set(&self, weights: Vec<f64>) -> Result<()> {
        let mut guard = self.inner.lock().expect("mailbox poisoned");
        if weights.len() != guard.len() {
            return Err(Error::InvalidWeights(format!(
                "expected {} weights, got {}",
                guard.len(),
                weights.len()
            )));
        }
        *guard = MixtureWeights::new(weights)?;
        Ok(())
    }

    pub fn snapshot(&self) -> MixtureWeights {
        self.inner.lock().expect("mailbox poisoned").clone()
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub name: String,
    pub checkpoint: Arc<ModelCheckpoint>,
    state: LstmState,
    /// Output of the most recent forward: the next-character distribution.
    next_dist: Option<Vector>,
    /// History characters absorbed into `state`.
    consumed: u64,
    active: bool,
    staleness: u64,
    forward_count: u64,
}

impl EnsembleMember {
    pub fn new(name: impl Into<String>, checkpoint: Arc<ModelCheckpoint>) -> Self {
        let state = checkpoint.fresh_state();
        Self {
            name: name.into(),
            checkpoint,
            state,
            next_dist: None,
            consumed: 0,
            active: false,
            staleness: 0,
            forward_count: 0,
        }
    }

    pub fn state(&self) -> &LstmState {
        &self.state
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Steps since this member was last run.
    pub fn staleness(&self) -> u64 {
        self.staleness
    }

    /// Total single-character forward passes, replays included.
    pub fn forward_count(&self) -> u64 {
        self.forward_count
    }

    fn reset(&mut self) {
        self.state = self.checkpoint.fresh_state();
        self.next_dist = None;
        self.consumed = 0;
        self.staleness = 0;
    }

    fn feed(&mut self, chars: &[CharIndex]) {
        if let Some(d) = self.checkpoint.feed(&mut self.state, chars) {
            self.next_dist = Some(d);
        }
        self.consumed += chars.len() as u64;
        self.forward_count += chars.len() as u64;
    }

    /// Brings the state up to date with `history`.
    fn catch_up(&mut self, history: &ReplayBuffer) {
        if self.consumed == history.total() && self.next_dist.is_some() {
            return;
        }
        match history.since(self.consumed) {
            Some(missed) => self.feed(&missed),
            None => {
                let total = history.total();
                self.reset();
                self.feed(&history.to_vec());
                self.consumed = total;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: usize,
    pub dist: Vec<f64>,
}

/// Everything observable about one generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEvent {
    pub step: u64,
    pub char: CharIndex,
    /// Joint distribution before temperature.
    pub rho: Vec<f64>,
    /// Distribution of each active model, in model order.
    pub rows: Vec<ModelRow>,
    pub weights: Vec<f64>,
    pub active: Vec<usize>,
    pub timestamp_ms: Option<u64>,
}

/// How the character of a step is chosen.
pub(crate) enum Choice<'a> {
    Sample(&'a mut Rng),
    Forced(CharIndex),
}

/// Detached copy of all member states and the history.
#[derive(Debug, Clone)]
pub struct EnsembleSnapshot {
    members: Vec<(LstmState, Option<Vector>, u64)>,
    history: ReplayBuffer,
}

impl EnsembleSnapshot {
    pub fn state(&self, member: usize) -> &LstmState {
        &self.members[member].0
    }

    pub fn history(&self) -> &ReplayBuffer {
        &self.history
    }
}

#[derive(Debug)]
pub struct Ensemble {
    members: Vec<EnsembleMember>,
    history: ReplayBuffer,
    mailbox: WeightsMailbox,
    temperature: f64,
    threshold: f64,
    step: u64,
    wall_clock: bool,
}

impl Ensemble {
    pub fn new(members: Vec<EnsembleMember>, weights: MixtureWeights) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidConfig("ensemble needs at least one model".into()));
        }
        if weights.len() != members.len() {
            return Err(Error::InvalidWeights(format!(
                "expected {} weights, got {}",
                members.len(),
                weights.len()
            )));
        }
        Ok(Self {
            members,
            history: ReplayBuffer::default(),
            mailbox: WeightsMailbox::new(weights),
            temperature: 1.0,
            threshold: ACTIVE_THRESHOLD,
            step: 0,
            wall_clock: false,
        })
    }

    pub fn from_checkpoints(
        models: impl IntoIterator<Item = (String, Arc<ModelCheckpoint>)>,
    ) -> Result<Self> {
        let members: Vec<_> = models
            .into_iter()
            .map(|(name, ck)| EnsembleMember::new(name, ck))
            .collect();
        let n = members.len().max(1);
        Self::new(members, MixtureWeights::uniform(n))
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn history(&self) -> &ReplayBuffer {
        &self.history
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn mailbox(&self) -> WeightsMailbox {
        self.mailbox.clone()
    }

    pub fn set_weights(&self, weights: Vec<f64>) -> Result<()> {
        self.mailbox.set(weights)
    }

    pub fn weights(&self) -> MixtureWeights {
        self.mailbox.snapshot()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {t}")));
        }
        self.temperature = t;
        Ok(())
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold;
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Stamp events with wall-clock time. Off by default so event streams
    /// stay reproducible.
    pub fn set_wall_clock(&mut self, on: bool) {
        self.wall_clock = on;
    }

    /// Returns every member to a fresh state and clears the history.
    pub fn reset(&mut self) {
        self.history = ReplayBuffer::default();
        for m in &mut self.members {
            m.reset();
            m.active = false;
        }
    }

    /// Conditions all models on `seed_text` from fresh states. Non-ASCII
    /// bytes are dropped; an empty seed changes nothing.
    pub fn prime(&mut self, seed_text: &str) {
        let (clean, _) = corpus::clean(seed_text.as_bytes());
        if clean.is_empty() {
            return;
        }
        self.reset();
        let chars = clean.into_bytes();
        for &c in &chars {
            self.history.push(c);
        }
        for m in &mut self.members {
            m.feed(&chars);
        }
    }

    pub fn clone_states(&self) -> EnsembleSnapshot {
        EnsembleSnapshot {
            members: self
                .members
                .iter()
                .map(|m| (m.state.clone(), m.next_dist.clone(), m.consumed))
                .collect(),
            history: self.history.clone(),
        }
    }

    pub fn restore(&mut self, snapshot: &EnsembleSnapshot) {
        for (m, (state, dist, consumed)) in self.members.iter_mut().zip(&snapshot.members) {
            m.state = state.clone();
            m.next_dist = dist.clone();
            m.consumed = *consumed;
        }
        self.history = snapshot.history.clone();
    }

    /// Samples one character under the weights posted at the time of the
    /// call.
    pub fn step(&mut self, rng: &mut Rng) -> Result<GenerationEvent> {
        let pi = self.mailbox.snapshot();
        self.step_with(&pi, rng)
    }

    pub fn step_with(&mut self, pi: &MixtureWeights, rng: &mut Rng) -> Result<GenerationEvent> {
        self.advance(pi, Choice::Sample(rng))
    }

    /// Runs a step but emits `c` instead of sampling.
    pub fn step_forced(&mut self, pi: &MixtureWeights, c: CharIndex) -> Result<GenerationEvent> {
        self.advance(pi, Choice::Forced(c))
    }

    /// Computes the active set and brings its members up to date.
    pub(crate) fn prepare(&mut self, pi: &MixtureWeights) -> Result<Vec<usize>> {
        if pi.len() != self.members.len() {
            return Err(Error::InvalidWeights(format!(
                "expected {} weights, got {}",
                self.members.len(),
                pi.len()
            )));
        }
        let active = active_set(pi, self.threshold)?;
        if self.history.is_empty() {
            self.history.push(START_CHAR);
        }
        for &i in &active {
            self.members[i].catch_up(&self.history);
        }
        Ok(active)
    }

    /// Live `(state, next distribution)` of a prepared member.
    pub(crate) fn member_view(&self, i: usize) -> (&LstmState, &Vector) {
        let m = &self.members[i];
        (&m.state, m.next_dist.as_ref().expect("prepared member"))
    }

    fn advance(&mut self, pi: &MixtureWeights, choice: Choice<'_>) -> Result<GenerationEvent> {
        let active = self.prepare(pi)?;
        let mut omega = ConditionalMatrix::new(self.members.len());
        for &i in &active {
            omega.rows[i] = self.members[i].next_dist.clone();
        }
        let rho = mix(&omega, pi, &active)?;
        let c = match choice {
            Choice::Forced(c) => {
                if !(rho.get(c as usize).copied().unwrap_or(0.0) > 0.0) {
                    return Err(Error::InvalidDistribution(format!(
                        "forced character {c} has no probability"
                    )));
                }
                c
            }
            Choice::Sample(rng) => {
                if self.temperature == 0.0 {
                    rho.argmax() as CharIndex
                } else {
                    let p = apply_temperature(&rho, self.temperature)?;
                    sample_categorical(&p, rng)? as CharIndex
                }
            }
        };

        self.history.push(c);
        for (i, m) in self.members.iter_mut().enumerate() {
            m.active = active.contains(&i);
            if m.active {
                m.staleness = 0;
                m.feed(&[c]);
            } else {
                m.staleness += 1;
            }
        }

        let event = GenerationEvent {
            step: self.step,
            char: c,
            rho: rho.into_inner(),
            rows: active
                .iter()
                .map(|&i| ModelRow {
                    model: i,
                    dist: omega.rows[i].take().expect("active row").into_inner(),
                })
                .collect(),
            weights: pi.as_slice().to_vec(),
            active,
            timestamp_ms: self.wall_clock.then(|| {
                SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0)
            }),
        };
        self.step += 1;
        Ok(event)
    }

    /// Advances every active member along `chars` as if they had been
    /// generated, without mixing.
    pub(crate) fn commit_chars(&mut self, pi: &MixtureWeights, chars: &[CharIndex]) -> Result<Vec<GenerationEvent>> {
        chars.iter().map(|&c| self.step_forced(pi, c)).collect()
    }
}
