//! Limited-depth beam search over the mixed distribution.
//!
//! Each search explores `depth` characters ahead on copied states, keeps the
//! `width` best partial paths per level by cumulative log-probability, and
//! commits the first `commit` characters of the best path to the live
//! ensemble. The weights are fixed for the whole search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{CharIndex, ALPHABET_SIZE};
use crate::ensemble::{mix, ConditionalMatrix, Ensemble, GenerationEvent, MixtureWeights};
use crate::error::{Error, Result};
use crate::lstm::LstmState;
use crate::numeric::{sample_categorical, Rng, Vector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub width: usize,
    pub depth: usize,
    /// Characters expanded per hypothesis.
    pub branch: usize,
    /// Characters emitted per search.
    pub commit: usize,
    /// Expand by sampling from the mixture instead of taking the top
    /// `branch` characters.
    pub stochastic: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 4,
            depth: 3,
            branch: 4,
            commit: 1,
            stochastic: false,
        }
    }
}

impl BeamConfig {
    pub fn greedy() -> Self {
        Self {
            width: 1,
            depth: 1,
            branch: 1,
            commit: 1,
            stochastic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch == 0 || self.branch > ALPHABET_SIZE {
            return Err(Error::InvalidConfig(format!(
                "branch must be in 1..={ALPHABET_SIZE}, got {}",
                self.branch
            )));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig("width and depth must be at least 1".into()));
        }
        if self.commit == 0 || self.commit > self.depth {
            return Err(Error::InvalidConfig(format!(
                "commit must be in 1..={}, got {}",
                self.depth, self.commit
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub chars: Vec<CharIndex>,
    /// Cumulative log-probability after each character.
    pub scores: Vec<f64>,
    /// `(member, state, next distribution)` for each active member.
    states: Vec<(usize, LstmState, Vector)>,
}

impl BeamHypothesis {
    pub fn score(&self) -> f64 {
        self.scores.last().copied().unwrap_or(0.0)
    }

    pub fn states(&self) -> impl Iterator<Item = (usize, &LstmState)> {
        self.states.iter().map(|(i, s, _)| (*i, s))
    }
}

#[derive(Debug, Clone)]
pub struct BeamOutcome {
    pub committed: Vec<CharIndex>,
    pub events: Vec<GenerationEvent>,
    /// Surviving hypotheses at full depth, best first.
    pub finalists: Vec<BeamHypothesis>,
    /// Hypotheses scored across all levels.
    pub expansions: usize,
}

impl BeamOutcome {
    pub fn best(&self) -> &BeamHypothesis {
        &self.finalists[0]
    }
}

fn rank(a: (&[CharIndex], f64), b: (&[CharIndex], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Characters with positive probability, highest first, lower index on ties.
fn top_chars(rho: &[f64], k: usize) -> Vec<CharIndex> {
    let mut idx: Vec<usize> = (0..rho.len()).filter(|&c| rho[c] > 0.0).collect();
    idx.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|c| c as CharIndex).collect()
}

/// Up to `k` distinct characters drawn without replacement.
fn sampled_chars(rho: &[f64], k: usize, rng: &mut Rng) -> Result<Vec<CharIndex>> {
    let mut p = rho.to_vec();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let mass: f64 = p.iter().sum();
        if !(mass > 0.0) {
            break;
        }
        for x in &mut p {
            *x /= mass;
        }
        let c = sample_categorical(&p, rng)?;
        p[c] = 0.0;
        out.push(c as CharIndex);
    }
    Ok(out)
}

fn joint(n: usize, pi: &MixtureWeights, active: &[usize], h: &BeamHypothesis) -> Result<Vector> {
    let mut omega = ConditionalMatrix::new(n);
    for (i, _, d) in &h.states {
        omega.rows[*i] = Some(d.clone());
    }
    mix(&omega, pi, active)
}

/// Runs one search and commits its first characters to `ensemble`.
pub fn beam_step(
    ensemble: &mut Ensemble,
    pi: &MixtureWeights,
    config: &BeamConfig,
    rng: &mut Rng,
) -> Result<BeamOutcome> {
    config.validate()?;
    let active = ensemble.prepare(pi)?;
    let n = ensemble.len();
    let root = BeamHypothesis {
        chars: Vec::new(),
        scores: Vec::new(),
        states: active
            .iter()
            .map(|&i| {
                let (s, d) = ensemble.member_view(i);
                (i, s.clone(), d.clone())
            })
            .collect(),
    };

    let mut beam = vec![root];
    let mut expansions = 0;
    for level in 0..config.depth {
        let mut candidates: Vec<(usize, CharIndex, f64, Vec<CharIndex>)> = Vec::new();
        for (parent, h) in beam.iter().enumerate() {
            let rho = joint(n, pi, &active, h)?;
            let chars = if config.stochastic {
                sampled_chars(&rho, config.branch, rng)?
            } else {
                top_chars(&rho, config.branch)
            };
            for c in chars {
                let mut path = h.chars.clone();
                path.push(c);
                candidates.push((parent, c, h.score() + rho[c as usize].ln(), path));
            }
        }
        expansions += candidates.len();
        candidates.sort_by(|a, b| rank((&a.3, a.2), (&b.3, b.2)));
        candidates.truncate(config.width);

        let last = level + 1 == config.depth;
        beam = candidates
            .into_iter()
            .map(|(parent, c, score, chars)| {
                let p = &beam[parent];
                let mut scores = p.scores.clone();
                scores.push(score);
                // states at the final level are never read
                let states = if last {
                    Vec::new()
                } else {
                    p.states
                        .iter()
                        .map(|(i, s, _)| {
                            let mut s = s.clone();
                            let d = ensemble.members()[*i].checkpoint.advance(&mut s, c);
                            (*i, s, d)
                        })
                        .collect()
                };
                BeamHypothesis { chars, scores, states }
            })
            .collect();
    }

    let committed = beam[0].chars[..config.commit].to_vec();
    let events = ensemble.commit_chars(pi, &committed)?;
    Ok(BeamOutcome {
        committed,
        events,
        finalists: beam,
        expansions,
    })
}
