//! Multi-layer LSTM language model: input, forget and output gates, no
//! peepholes, no skip connections, and a 128-way softmax head on the top
//! layer.
//!
//! Gate blocks inside every `4H`-row weight matrix and bias are stacked in
//! the fixed order `[input, forget, cell-candidate, output]` (see
//! [`GATE_ORDER`]). Layer `k > 0` reads only the hidden output of layer
//! `k - 1`, and the head reads only the top layer's hidden output.

use serde::{Deserialize, Serialize};

use crate::corpus::{check_index, CharIndex, ALPHABET_SIZE};
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softmax_in_place, Matrix, Rng, Vector};

/// Tag stored in checkpoints for the gate block order.
pub const GATE_ORDER: &str = "ifgo";

pub const MAX_LAYERS: usize = 3;
pub const MAX_HIDDEN: usize = 512;

/// Initial forget-gate bias.
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArchitecture {
    pub layer_sizes: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ModelArchitecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let arch = Self {
            layer_sizes,
            input_dim: ALPHABET_SIZE,
            output_dim: ALPHABET_SIZE,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() || self.layer_sizes.len() > MAX_LAYERS {
            return Err(Error::InvalidArchitecture(format!(
                "expected 1 to {MAX_LAYERS} layers, got {}",
                self.layer_sizes.len()
            )));
        }
        if let Some(&bad) = self
            .layer_sizes
            .iter()
            .find(|&&h| h == 0 || h > MAX_HIDDEN)
        {
            return Err(Error::InvalidArchitecture(format!(
                "hidden size {bad} outside 1..={MAX_HIDDEN}"
            )));
        }
        if self.input_dim != ALPHABET_SIZE || self.output_dim != ALPHABET_SIZE {
            return Err(Error::InvalidArchitecture(format!(
                "input/output dims must be {ALPHABET_SIZE}, got {}/{}",
                self.input_dim, self.output_dim
            )));
        }
        Ok(())
    }

    pub fn top_hidden(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    /// Input width of layer `k`.
    pub fn layer_input(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim
        } else {
            self.layer_sizes[k - 1]
        }
    }

    pub fn param_count(&self) -> usize {
        let layers: usize = (0..self.layer_sizes.len())
            .map(|k| {
                let h = self.layer_sizes[k];
                4 * h * (self.layer_input(k) + h + 1)
            })
            .sum();
        layers + self.output_dim * self.top_hidden() + self.output_dim
    }
}

/// Weights of one LSTM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    /// `4H × D`
    pub w_x: Matrix,
    /// `4H × H`
    pub w_h: Matrix,
    /// `4H`
    pub b: Vector,
}

impl LstmLayerParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Matrix::zeros(4 * hidden, input),
            w_h: Matrix::zeros(4 * hidden, hidden),
            b: Vector::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    pub fn input(&self) -> usize {
        self.w_x.cols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        for (context, actual) in [
            ("w_x rows", self.w_x.rows()),
            ("w_h rows", self.w_h.rows()),
            ("bias length", self.b.len()),
        ] {
            if actual != 4 * h {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: 4 * h,
                    actual,
                });
            }
        }
        Ok(())
    }
}

/// All trainable tensors of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LstmLayerParams>,
    /// `128 × H_top`
    pub w_y: Matrix,
    /// `128`
    pub b_y: Vector,
}

impl ModelParams {
    pub fn zeros(arch: &ModelArchitecture) -> Self {
        let layers = arch
            .layer_sizes
            .iter()
            .enumerate()
            .map(|(k, &h)| LstmLayerParams::zeros(arch.layer_input(k), h))
            .collect();
        Self {
            layers,
            w_y: Matrix::zeros(arch.output_dim, arch.top_hidden()),
            b_y: Vector::zeros(arch.output_dim),
        }
    }

    /// Uniform `(-s, s)` weights with `s = 1/sqrt(H)`, zero biases except
    /// the forget gate, which starts at [`FORGET_BIAS_INIT`].
    pub fn init(arch: &ModelArchitecture, rng: &mut Rng) -> Self {
        let mut params = Self::zeros(arch);
        for layer in &mut params.layers {
            let h = layer.hidden();
            let s = 1.0 / (h as f64).sqrt();
            for w in layer.w_x.as_mut_slice() {
                *w = rng.uniform(-s, s);
            }
            for w in layer.w_h.as_mut_slice() {
                *w = rng.uniform(-s, s);
            }
            for b in &mut layer.b[h..2 * h] {
                *b = FORGET_BIAS_INIT;
            }
        }
        let s = 1.0 / (arch.top_hidden() as f64).sqrt();
        for w in params.w_y.as_mut_slice() {
            *w = rng.uniform(-s, s);
        }
        params
    }

    /// Tensors in serialization order: per layer `w_x, w_h, b`, then
    /// `w_y, b_y`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.w_x.as_slice());
            out.push(l.w_h.as_slice());
            out.push(&l.b[..]);
        }
        out.push(self.w_y.as_slice());
        out.push(&self.b_y[..]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.w_x.as_mut_slice());
            out.push(l.w_h.as_mut_slice());
            out.push(&mut l.b[..]);
        }
        out.push(self.w_y.as_mut_slice());
        out.push(&mut self.b_y[..]);
        out
    }

    /// Human-readable names matching [`ModelParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in 0..self.layers.len() {
            out.push(format!("layer{k}.w_x"));
            out.push(format!("layer{k}.w_h"));
            out.push(format!("layer{k}.b"));
        }
        out.push("head.w_y".into());
        out.push("head.b_y".into());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn check(&self, arch: &ModelArchitecture) -> Result<()> {
        if self.layers.len() != arch.layer_sizes.len() {
            return Err(Error::DimensionMismatch {
                context: "layer count",
                expected: arch.layer_sizes.len(),
                actual: self.layers.len(),
            });
        }
        for (k, layer) in self.layers.iter().enumerate() {
            layer.check()?;
            if layer.hidden() != arch.layer_sizes[k] {
                return Err(Error::DimensionMismatch {
                    context: "hidden size",
                    expected: arch.layer_sizes[k],
                    actual: layer.hidden(),
                });
            }
            if layer.input() != arch.layer_input(k) {
                return Err(Error::DimensionMismatch {
                    context: "layer input size",
                    expected: arch.layer_input(k),
                    actual: layer.input(),
                });
            }
        }
        if self.w_y.rows() != arch.output_dim || self.w_y.cols() != arch.top_hidden() {
            return Err(Error::DimensionMismatch {
                context: "output head",
                expected: arch.output_dim * arch.top_hidden(),
                actual: self.w_y.rows() * self.w_y.cols(),
            });
        }
        if self.b_y.len() != arch.output_dim {
            return Err(Error::DimensionMismatch {
                context: "output bias",
                expected: arch.output_dim,
                actual: self.b_y.len(),
            });
        }
        Ok(())
    }
}

/// Recurrent memory of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub h: Vector,
    pub c: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub layers: Vec<LayerState>,
}

impl LstmState {
    pub fn matches(&self, arch: &ModelArchitecture) -> bool {
        self.layers.len() == arch.layer_sizes.len()
            && self
                .layers
                .iter()
                .zip(&arch.layer_sizes)
                .all(|(l, &h)| l.h.len() == h && l.c.len() == h)
    }

    /// Exact equality down to the bit pattern of every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let bits = |v: &Vector| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| bits(&a.h) == bits(&b.h) && bits(&a.c) == bits(&b.c))
    }
}

pub fn fresh_state(arch: &ModelArchitecture) -> Result<LstmState> {
    arch.validate()?;
    Ok(LstmState {
        layers: arch
            .layer_sizes
            .iter()
            .map(|&h| LayerState {
                h: Vector::zeros(h),
                c: Vector::zeros(h),
            })
            .collect(),
    })
}

/// Gate activations after the nonlinearity, in `[i, f, g, o]` blocks of
/// `H`; kept by the training pass for backpropagation.
pub(crate) fn activate_gates(pre: &mut [f64], hidden: usize) {
    for (j, z) in pre.iter_mut().enumerate() {
        *z = if (2 * hidden..3 * hidden).contains(&j) {
            z.tanh()
        } else {
            sigmoid(*z)
        };
    }
}

/// Combines activated gates with the previous cell into `(h, c)`.
pub(crate) fn combine_gates(gates: &[f64], c_prev: &[f64], h: &mut [f64], c: &mut [f64]) {
    let n = c_prev.len();
    let (i, rest) = gates.split_at(n);
    let (f, rest) = rest.split_at(n);
    let (g, o) = rest.split_at(n);
    for j in 0..n {
        c[j] = f[j] * c_prev[j] + i[j] * g[j];
        h[j] = o[j] * c[j].tanh();
    }
}

/// One LSTM cell update:
///
/// ```text
/// i = σ(W_x,i x + W_h,i h + b_i)      f = σ(W_x,f x + W_h,f h + b_f)
/// g = tanh(W_x,g x + W_h,g h + b_g)   o = σ(W_x,o x + W_h,o h + b_o)
/// c = f ⊙ c_prev + i ⊙ g              h = o ⊙ tanh(c)
/// ```
pub fn cell_step(
    params: &LstmLayerParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vector, Vector)> {
    params.check()?;
    let hidden = params.hidden();
    for (context, expected, actual) in [
        ("cell input", params.input(), x.len()),
        ("previous hidden", hidden, h_prev.len()),
        ("previous cell", hidden, c_prev.len()),
    ] {
        if expected != actual {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                actual,
            });
        }
    }
    let mut pre = params.b.to_vec();
    params.w_x.matvec_acc(x, &mut pre);
    params.w_h.matvec_acc(h_prev, &mut pre);
    activate_gates(&mut pre, hidden);
    let mut h = Vector::zeros(hidden);
    let mut c = Vector::zeros(hidden);
    combine_gates(&pre, c_prev, &mut h, &mut c);
    Ok((h, c))
}

/// Metadata written alongside the parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub corpus: String,
    pub training_steps: u64,
    pub final_loss: Option<f64>,
    pub seed: Option<u64>,
    pub rng_algorithm: Option<String>,
}

/// A trained (or constructed) model: architecture, parameters and
/// provenance. Immutable once built; share it freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub architecture: ModelArchitecture,
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn new(
        architecture: ModelArchitecture,
        params: ModelParams,
        meta: CheckpointMeta,
    ) -> Result<Self> {
        architecture.validate()?;
        params.check(&architecture)?;
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            architecture,
            params,
            meta,
        })
    }

    pub fn zeros(architecture: ModelArchitecture) -> Result<Self> {
        architecture.validate()?;
        let params = ModelParams::zeros(&architecture);
        Ok(Self {
            architecture,
            params,
            meta: CheckpointMeta::default(),
        })
    }

    pub fn random(architecture: ModelArchitecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let params = ModelParams::init(&architecture, &mut Rng::new(seed));
        Ok(Self {
            architecture,
            params,
            meta: CheckpointMeta {
                seed: Some(seed),
                ..CheckpointMeta::default()
            },
        })
    }

    pub fn fresh_state(&self) -> LstmState {
        fresh_state(&self.architecture).expect("checkpoint architecture is validated")
    }

    /// Next-character distribution after feeding the one-hot vector `x`.
    /// The input state is left untouched.
    pub fn forward(&self, state: &LstmState, x: &[f64]) -> Result<(Vector, LstmState)> {
        if x.len() != ALPHABET_SIZE {
            return Err(Error::DimensionMismatch {
                context: "one-hot input",
                expected: ALPHABET_SIZE,
                actual: x.len(),
            });
        }
        let hot: Vec<usize> = (0..x.len()).filter(|&i| x[i] != 0.0).collect();
        if hot.len() != 1 || x[hot[0]] != 1.0 {
            return Err(Error::InvalidDistribution(
                "input is not a one-hot vector".into(),
            ));
        }
        self.forward_char(state, hot[0])
    }

    pub fn forward_char(&self, state: &LstmState, index: usize) -> Result<(Vector, LstmState)> {
        let index = check_index(index)?;
        if !state.matches(&self.architecture) {
            return Err(Error::DimensionMismatch {
                context: "state layers",
                expected: self.architecture.layer_sizes.len(),
                actual: state.layers.len(),
            });
        }
        let mut next = state.clone();
        let dist = self.advance(&mut next, index);
        Ok((dist, next))
    }

    /// In-place variant of [`ModelCheckpoint::forward_char`] for the
    /// generation loop. `state` must match the architecture.
    pub fn advance(&self, state: &mut LstmState, index: CharIndex) -> Vector {
        let mut input: Vec<f64> = Vec::new();
        for (k, (layer, st)) in self.params.layers.iter().zip(&mut state.layers).enumerate() {
            let hidden = layer.hidden();
            let mut pre = layer.b.to_vec();
            if k == 0 {
                layer.w_x.column_acc(index as usize, &mut pre);
            } else {
                layer.w_x.matvec_acc(&input, &mut pre);
            }
            layer.w_h.matvec_acc(&st.h, &mut pre);
            activate_gates(&mut pre, hidden);
            let c_prev = std::mem::take(&mut st.c);
            let mut c = Vector::zeros(hidden);
            combine_gates(&pre, &c_prev, &mut st.h, &mut c);
            st.c = c;
            input.clear();
            input.extend_from_slice(&st.h);
        }
        let mut logits = self.params.b_y.to_vec();
        self.params.w_y.matvec_acc(&input, &mut logits);
        softmax_in_place(&mut logits);
        Vector::from(logits)
    }

    /// Feeds `text` from `state`, returning the distribution after the last
    /// character (or `None` for empty input).
    pub fn feed(&self, state: &mut LstmState, text: &[CharIndex]) -> Option<Vector> {
        let mut last = None;
        for &c in text {
            last = Some(self.advance(state, c));
        }
        last
    }
}
