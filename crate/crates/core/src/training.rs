//! Next-character NLL training with truncated backpropagation through time.
//!
//! Each step draws one window per batch stream. Streams walk contiguous
//! runs of overlapping windows; the recurrent state reached `stride`
//! characters into a window is exactly the state at the start of the next
//! one, so it is carried over (without gradient) and reset when a stream
//! wraps. Dropout masks the non-recurrent upward connections only: each
//! layer's hidden output on its way to the next layer or to the softmax
//! head. The `h → h` recurrence is never masked.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, CharIndex, CorpusWindow, ALPHABET_SIZE, MAX_WINDOW};
use crate::error::{Error, Result};
use crate::lstm::{
    activate_gates, combine_gates, fresh_state, CheckpointMeta, LstmState, ModelArchitecture,
    ModelCheckpoint, ModelParams,
};
use crate::numeric::{softmax_in_place, Rng, Vector, RNG_ALGORITHM};

/// Probability floor applied before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub const MAX_DROPOUT: f64 = 0.3;

/// `-ln dist[target]`, with `dist[target]` floored at [`PROB_FLOOR`].
pub fn nll_loss(dist: &[f64], target: usize) -> Result<f64> {
    let p = *dist.get(target).ok_or(Error::IndexOutOfRange(target))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
pub fn apply_dropout(h: &[f64], keep: &[bool], p: f64) -> Result<Vector> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("dropout probability {p}")));
    }
    if keep.len() != h.len() {
        return Err(Error::DimensionMismatch {
            context: "dropout mask",
            expected: h.len(),
            actual: keep.len(),
        });
    }
    let scale = 1.0 / (1.0 - p);
    Ok(h.iter()
        .zip(keep)
        .map(|(&x, &k)| if k { x * scale } else { 0.0 })
        .collect::<Vec<_>>()
        .into())
}

/// Per-timestep multipliers for each layer's upward output:
/// `scales[t][k]` has one entry per hidden unit of layer `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub scales: Vec<Vec<Vector>>,
}

impl DropoutMasks {
    pub fn sample(arch: &ModelArchitecture, steps: usize, p: f64, rng: &mut Rng) -> Self {
        let scale = 1.0 / (1.0 - p);
        let scales = (0..steps)
            .map(|_| {
                arch.layer_sizes
                    .iter()
                    .map(|&h| {
                        (0..h)
                            .map(|_| if rng.bernoulli(p) { 0.0 } else { scale })
                            .collect::<Vec<_>>()
                            .into()
                    })
                    .collect()
            })
            .collect();
        Self { scales }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub dropout_prob: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Report interval in steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: MAX_WINDOW,
            stride: corpus::DEFAULT_STRIDE,
            batch_size: 16,
            learning_rate: 2e-3,
            grad_clip_norm: 5.0,
            dropout_prob: 0.0,
            max_steps: 2000,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.seq_len == 0 || self.seq_len > MAX_WINDOW {
            return bad(format!("seq_len {} outside 1..={MAX_WINDOW}", self.seq_len));
        }
        if self.stride == 0 || self.stride > self.seq_len {
            return bad(format!("stride {} outside 1..={}", self.stride, self.seq_len));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("clip norm {}", self.grad_clip_norm));
        }
        if !(0.0..=MAX_DROPOUT).contains(&self.dropout_prob) {
            return bad(format!(
                "dropout {} outside [0, {MAX_DROPOUT}]",
                self.dropout_prob
            ));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }
}

struct StepCache {
    /// Layer inputs (`None` for the one-hot layer 0).
    inputs: Vec<Option<Vec<f64>>>,
    h_prev: Vec<Vec<f64>>,
    c_prev: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    /// Top-layer output after dropout, as fed to the head.
    head_in: Vec<f64>,
    probs: Vec<f64>,
}

/// Accumulates the gradient of the mean per-character NLL over `window`
/// into `grads`, starting from `init` (treated as a constant).
///
/// Returns the mean loss and the state after the first `carry` inputs.
pub fn backward_into(
    ck: &ModelCheckpoint,
    window: &CorpusWindow<'_>,
    init: &LstmState,
    masks: Option<&DropoutMasks>,
    carry: usize,
    grads: &mut ModelParams,
) -> Result<(f64, LstmState)> {
    let params = &ck.params;
    let arch = &ck.architecture;
    let steps = window.len();
    if steps == 0 || window.target.len() != steps {
        return Err(Error::DimensionMismatch {
            context: "window targets",
            expected: steps.max(1),
            actual: window.target.len(),
        });
    }
    if !init.matches(arch) {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: arch.layer_sizes.len(),
            actual: init.layers.len(),
        });
    }
    grads.check(arch)?;
    if let Some(m) = masks {
        if m.scales.len() < steps {
            return Err(Error::DimensionMismatch {
                context: "dropout mask steps",
                expected: steps,
                actual: m.scales.len(),
            });
        }
    }
    let n_layers = params.layers.len();

    let mut state = init.clone();
    let mut carried = None;
    let mut caches = Vec::with_capacity(steps);
    let mut loss = 0.0;
    for t in 0..steps {
        let mut cache = StepCache {
            inputs: Vec::with_capacity(n_layers),
            h_prev: Vec::with_capacity(n_layers),
            c_prev: Vec::with_capacity(n_layers),
            gates: Vec::with_capacity(n_layers),
            c: Vec::with_capacity(n_layers),
            head_in: Vec::new(),
            probs: Vec::new(),
        };
        let mut upward: Vec<f64> = Vec::new();
        for (k, layer) in params.layers.iter().enumerate() {
            let hidden = layer.hidden();
            let st = &mut state.layers[k];
            let mut pre = layer.b.to_vec();
            if k == 0 {
                let c = window.input[t];
                if c as usize >= ALPHABET_SIZE {
                    return Err(Error::IndexOutOfRange(c as usize));
                }
                layer.w_x.column_acc(c as usize, &mut pre);
                cache.inputs.push(None);
            } else {
                layer.w_x.matvec_acc(&upward, &mut pre);
                cache.inputs.push(Some(upward.clone()));
            }
            layer.w_h.matvec_acc(&st.h, &mut pre);
            activate_gates(&mut pre, hidden);
            let mut h = vec![0.0; hidden];
            let mut c = vec![0.0; hidden];
            combine_gates(&pre, &st.c, &mut h, &mut c);
            cache.h_prev.push(std::mem::replace(&mut st.h, h.into()).into_inner());
            cache.c_prev.push(std::mem::replace(&mut st.c, c.clone().into()).into_inner());
            cache.gates.push(pre);
            cache.c.push(c);
            upward = st.h.to_vec();
            if let Some(m) = masks {
                for (u, s) in upward.iter_mut().zip(m.scales[t][k].iter()) {
                    *u *= s;
                }
            }
        }
        let mut logits = params.b_y.to_vec();
        params.w_y.matvec_acc(&upward, &mut logits);
        softmax_in_place(&mut logits);
        loss += nll_loss(&logits, window.target[t] as usize)?;
        cache.head_in = upward;
        cache.probs = logits;
        caches.push(cache);
        if t + 1 == carry {
            carried = Some(state.clone());
        }
    }
    let inv = 1.0 / steps as f64;

    let mut dh_next: Vec<Vec<f64>> = arch.layer_sizes.iter().map(|&h| vec![0.0; h]).collect();
    let mut dc_next = dh_next.clone();
    for t in (0..steps).rev() {
        let cache = &caches[t];
        let mut dlogits = cache.probs.clone();
        dlogits[window.target[t] as usize] -= 1.0;
        for d in &mut dlogits {
            *d *= inv;
        }
        grads.w_y.outer_acc(&dlogits, &cache.head_in);
        for (g, d) in grads.b_y.iter_mut().zip(&dlogits) {
            *g += d;
        }
        let mut d_up = vec![0.0; arch.top_hidden()];
        params.w_y.matvec_t_acc(&dlogits, &mut d_up);

        for k in (0..n_layers).rev() {
            let layer = &params.layers[k];
            let hidden = layer.hidden();
            if let Some(m) = masks {
                for (d, s) in d_up.iter_mut().zip(m.scales[t][k].iter()) {
                    *d *= s;
                }
            }
            let gates = &cache.gates[k];
            let (i, rest) = gates.split_at(hidden);
            let (f, rest) = rest.split_at(hidden);
            let (g, o) = rest.split_at(hidden);
            let c = &cache.c[k];
            let c_prev = &cache.c_prev[k];
            let mut dz = vec![0.0; 4 * hidden];
            for j in 0..hidden {
                let dh = d_up[j] + dh_next[k][j];
                let tc = c[j].tanh();
                let d_o = dh * tc;
                let dc = dh * o[j] * (1.0 - tc * tc) + dc_next[k][j];
                let d_i = dc * g[j];
                let d_g = dc * i[j];
                let d_f = dc * c_prev[j];
                dc_next[k][j] = dc * f[j];
                dz[j] = d_i * i[j] * (1.0 - i[j]);
                dz[hidden + j] = d_f * f[j] * (1.0 - f[j]);
                dz[2 * hidden + j] = d_g * (1.0 - g[j] * g[j]);
                dz[3 * hidden + j] = d_o * o[j] * (1.0 - o[j]);
            }
            let gl = &mut grads.layers[k];
            match &cache.inputs[k] {
                None => {
                    let col = window.input[t] as usize;
                    let cols = gl.w_x.cols();
                    let data = gl.w_x.as_mut_slice();
                    for (r, d) in dz.iter().enumerate() {
                        data[r * cols + col] += d;
                    }
                }
                Some(x) => gl.w_x.outer_acc(&dz, x),
            }
            gl.w_h.outer_acc(&dz, &cache.h_prev[k]);
            for (b, d) in gl.b.iter_mut().zip(&dz) {
                *b += d;
            }
            let mut dh_prev = vec![0.0; hidden];
            layer.w_h.matvec_t_acc(&dz, &mut dh_prev);
            dh_next[k] = dh_prev;
            if k > 0 {
                let mut dx = vec![0.0; layer.input()];
                layer.w_x.matvec_t_acc(&dz, &mut dx);
                d_up = dx;
            }
        }
    }

    let carried = carried.unwrap_or(state);
    Ok((loss * inv, carried))
}

/// Gradient and mean loss of one window from `init`, without carry.
pub fn backward(
    ck: &ModelCheckpoint,
    window: &CorpusWindow<'_>,
    init: &LstmState,
    masks: Option<&DropoutMasks>,
) -> Result<(ModelParams, f64)> {
    let mut grads = ModelParams::zeros(&ck.architecture);
    let (loss, _) = backward_into(ck, window, init, masks, window.len(), &mut grads)?;
    Ok((grads, loss))
}

/// Scales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            for g in t {
                *g *= scale;
            }
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    pub fn new(arch: &ModelArchitecture, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: ModelParams::zeros(arch),
            v: ModelParams::zeros(arch),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub step: u64,
    /// Mean NLL over the interval, nats per character.
    pub mean_nll: f64,
    pub bits_per_char: f64,
    /// Pre-clip global gradient norm at the last step of the interval.
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub corpus: String,
    pub architecture: ModelArchitecture,
    pub config: TrainConfig,
    pub rng_algorithm: String,
    pub entries: Vec<ReportEntry>,
}

impl TrainReport {
    pub fn final_nll(&self) -> Option<f64> {
        self.entries.last().map(|e| e.mean_nll)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_nll,bits_per_char,grad_norm,wall_time_s\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.step, e.mean_nll, e.bits_per_char, e.grad_norm, e.wall_time_s
            ));
        }
        out
    }
}

struct Stream {
    first: usize,
    end: usize,
    cursor: usize,
    state: LstmState,
}

/// Trains a model on cleaned `text`.
///
/// `on_interval` is called after every report interval with the current
/// checkpoint, e.g. to write intermediate files.
pub fn train_with(
    corpus_name: &str,
    text: &[CharIndex],
    arch: &ModelArchitecture,
    config: &TrainConfig,
    mut on_interval: impl FnMut(&ModelCheckpoint, &ReportEntry),
) -> Result<(ModelCheckpoint, TrainReport)> {
    arch.validate()?;
    config.validate()?;
    let all: Vec<CorpusWindow<'_>> = corpus::windows(text, config.seq_len, config.stride)?.collect();

    let mut rng = Rng::new(config.seed);
    let params = ModelParams::init(arch, &mut rng);
    let mut ck = ModelCheckpoint {
        architecture: arch.clone(),
        params,
        meta: CheckpointMeta {
            corpus: corpus_name.to_string(),
            training_steps: 0,
            final_loss: None,
            seed: Some(config.seed),
            rng_algorithm: Some(RNG_ALGORITHM.to_string()),
        },
    };
    let mut adam = Adam::new(arch, config.learning_rate);

    let n_streams = config.batch_size.min(all.len());
    let per = all.len().div_ceil(n_streams);
    let mut streams: Vec<Stream> = (0..n_streams)
        .map(|s| {
            let first = s * per;
            let end = ((s + 1) * per).min(all.len());
            Stream {
                first,
                end,
                cursor: first,
                state: fresh_state(arch).expect("validated"),
            }
        })
        .filter(|s| s.first < s.end)
        .collect();

    let mut report = TrainReport {
        corpus: corpus_name.to_string(),
        architecture: arch.clone(),
        config: config.clone(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        entries: Vec::new(),
    };
    let started = Instant::now();
    let mut interval_loss = 0.0;
    let mut interval_steps = 0u64;
    let batch = streams.len() as f64;

    for step in 1..=config.max_steps {
        let mut grads = ModelParams::zeros(arch);
        let mut step_loss = 0.0;
        for stream in &mut streams {
            let window = all[stream.cursor];
            let masks = (config.dropout_prob > 0.0).then(|| {
                DropoutMasks::sample(arch, window.len(), config.dropout_prob, &mut rng)
            });
            let (loss, carried) = backward_into(
                &ck,
                &window,
                &stream.state,
                masks.as_ref(),
                config.stride,
                &mut grads,
            )?;
            step_loss += loss;
            stream.cursor += 1;
            if stream.cursor == stream.end {
                stream.cursor = stream.first;
                stream.state = fresh_state(arch)?;
            } else {
                stream.state = carried;
            }
        }
        for t in grads.tensors_mut() {
            for g in t {
                *g /= batch;
            }
        }
        let grad_norm = clip_gradients(&mut grads, config.grad_clip_norm);
        adam.update(&mut ck.params, &grads);
        if !ck.params.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "parameters diverged at step {step}"
            )));
        }

        interval_loss += step_loss / batch;
        interval_steps += 1;
        if step % config.log_every == 0 || step == config.max_steps {
            let mean_nll = interval_loss / interval_steps as f64;
            let entry = ReportEntry {
                step,
                mean_nll,
                bits_per_char: mean_nll / std::f64::consts::LN_2,
                grad_norm,
                wall_time_s: started.elapsed().as_secs_f64(),
            };
            ck.meta.training_steps = step;
            ck.meta.final_loss = Some(mean_nll);
            on_interval(&ck, &entry);
            report.entries.push(entry);
            interval_loss = 0.0;
            interval_steps = 0;
        }
    }
    Ok((ck, report))
}

pub fn train(
    corpus_name: &str,
    text: &[CharIndex],
    arch: &ModelArchitecture,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainReport)> {
    train_with(corpus_name, text, arch, config, |_, _| {})
}
