//! Network building blocks: MLP trunks, a GRU input encoder, feature-wise
//! affine modulation, random Fourier time features, and an optional
//! mixture-of-experts head for the coefficient map.
//!
//! Every block exists twice: a plain `f64` value path used by evaluation and
//! tests, and a graph path that records onto a [`Tape`](crate::Tape) for
//! training. Consistency tests pin the two against each other so the formulas
//! cannot drift apart.
//!
//! Weights for a composite network live in one flat `Vec<f64>`; each
//! composite computes fixed segment offsets from its spec, so a (spec,
//! weights) pair fully determines the function.

mod coeff;
mod solution;

pub use coeff::{CoeffNet, CoeffNetSpec, MoeSpec};
pub use solution::{ContextTrace, FilmNodes, FilmValues, PointTrace, SolutionNet, SolutionNetSpec};

use crate::autodiff::{ExprId, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NnError {
    /// Two vectors that must agree in length do not.
    Shape {
        what: &'static str,
        left: usize,
        right: usize,
    },
    /// A spec field is out of its valid range.
    BadSpec(String),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::Shape { what, left, right } => {
                write!(f, "shape mismatch in {what}: {left} vs {right}")
            }
            NnError::BadSpec(msg) => write!(f, "bad network spec: {msg}"),
        }
    }
}

impl std::error::Error for NnError {}

/// Fully connected net: `inputs -> hidden[0] -> ... -> outputs`, tanh on
/// hidden layers, linear output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
}

impl MlpSpec {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(self.inputs);
        s.extend_from_slice(&self.hidden);
        s.push(self.outputs);
        s
    }

    /// Weights + biases over all layers.
    pub fn param_count(&self) -> usize {
        let s = self.sizes();
        s.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

/// Scalar-input gated recurrent cell; the final hidden state is the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruSpec {
    pub hidden: usize,
}

impl GruSpec {
    /// Three gates, each with input weight (h), recurrent matrix (h*h), and
    /// bias (h).
    pub fn param_count(&self) -> usize {
        3 * (self.hidden + self.hidden * self.hidden + self.hidden)
    }
}

/// Random Fourier time features: `count` frequencies drawn from N(0, sigma^2)
/// at init and frozen, encoding t as [cos(2 pi b t)..., sin(2 pi b t)...].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffSpec {
    pub count: usize,
    pub sigma: f64,
}

/// Plain forward pass of an MLP on `f64`s. `weights` is the net's own flat
/// segment (layer-major: W row-major, then b, per layer).
pub fn mlp_forward(spec: &MlpSpec, weights: &[f64], input: &[f64]) -> Result<Vec<f64>, NnError> {
    if input.len() != spec.inputs {
        return Err(NnError::Shape {
            what: "mlp input",
            left: input.len(),
            right: spec.inputs,
        });
    }
    if weights.len() != spec.param_count() {
        return Err(NnError::Shape {
            what: "mlp weights",
            left: weights.len(),
            right: spec.param_count(),
        });
    }
    let sizes = spec.sizes();
    let n_layers = sizes.len() - 1;
    let mut act = input.to_vec();
    let mut off = 0;
    for l in 0..n_layers {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let w = &weights[off..off + n_out * n_in];
        let b = &weights[off + n_out * n_in..off + n_out * (n_in + 1)];
        off += n_out * (n_in + 1);
        let mut next = vec![0.0; n_out];
        for (i, target) in next.iter_mut().enumerate() {
            let row = &w[i * n_in..(i + 1) * n_in];
            let mut acc = b[i];
            for (x, wij) in act.iter().zip(row) {
                acc += x * wij;
            }
            *target = if l + 1 < n_layers { acc.tanh() } else { acc };
        }
        act = next;
    }
    Ok(act)
}

/// Feature-wise affine modulation `gamma .* z + beta`.
pub fn film_modulate(z: &[f64], gamma: &[f64], beta: &[f64]) -> Result<Vec<f64>, NnError> {
    if z.len() != gamma.len() {
        return Err(NnError::Shape {
            what: "film gamma",
            left: z.len(),
            right: gamma.len(),
        });
    }
    if z.len() != beta.len() {
        return Err(NnError::Shape {
            what: "film beta",
            left: z.len(),
            right: beta.len(),
        });
    }
    Ok(z.iter()
        .zip(gamma)
        .zip(beta)
        .map(|((zi, gi), bi)| gi * zi + bi)
        .collect())
}

/// Fourier time features for frozen frequencies: cosines first, then sines.
pub fn rff_encode(t: f64, freqs: &[f64]) -> Vec<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(2 * freqs.len());
    out.extend(freqs.iter().map(|b| (tau * b * t).cos()));
    out.extend(freqs.iter().map(|b| (tau * b * t).sin()));
    out
}

/// Softmax-gated convex combination of expert outputs.
pub fn moe_combine(logits: &[f64], experts: &[Vec<f64>]) -> Result<Vec<f64>, NnError> {
    if logits.len() != experts.len() {
        return Err(NnError::Shape {
            what: "moe gate",
            left: logits.len(),
            right: experts.len(),
        });
    }
    if experts.is_empty() {
        return Err(NnError::BadSpec("mixture needs at least one expert".into()));
    }
    let dim = experts[0].len();
    for e in experts {
        if e.len() != dim {
            return Err(NnError::Shape {
                what: "moe expert outputs",
                left: e.len(),
                right: dim,
            });
        }
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut out = vec![0.0; dim];
    for (alpha, e) in exps.iter().zip(experts) {
        for (o, v) in out.iter_mut().zip(e) {
            *o += alpha / z * v;
        }
    }
    Ok(out)
}

/// Fixed state-feature expansion for the coefficient map. The order is a
/// stable external contract:
/// `[y, v, u, y^2, y^3, v^2, |y|, |v|, y*v]`.
pub fn augment_state(y: f64, v: f64, u: f64) -> [f64; 9] {
    [
        y,
        v,
        u,
        y * y,
        y * y * y,
        v * v,
        y.abs(),
        v.abs(),
        y * v,
    ]
}

/// Number of coefficient-map input features with/without augmentation.
pub const AUGMENTED_FEATURES: usize = 9;
pub const RAW_FEATURES: usize = 3;

/// One sample from N(0, 1) via Box-Muller; enough for the handful of
/// frequency draws at init time.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let mut u1: f64 = rng.gen();
    while u1 <= f64::MIN_POSITIVE {
        u1 = rng.gen();
    }
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fills an MLP segment with Xavier-uniform weights and zero biases, drawing
/// in layer order, row-major — the draw order is part of the format.
pub(crate) fn xavier_mlp(spec: &MlpSpec, out: &mut [f64], rng: &mut ChaCha8Rng) {
    debug_assert_eq!(out.len(), spec.param_count());
    let sizes = spec.sizes();
    let mut off = 0;
    for w in sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        for slot in out[off..off + n_out * n_in].iter_mut() {
            *slot = rng.gen_range(-a..a);
        }
        for slot in out[off + n_out * n_in..off + n_out * (n_in + 1)].iter_mut() {
            *slot = 0.0;
        }
        off += n_out * (n_in + 1);
    }
}

/// GRU init: Xavier on input and recurrent matrices per gate, zero biases.
pub(crate) fn xavier_gru(spec: &GruSpec, out: &mut [f64], rng: &mut ChaCha8Rng) {
    debug_assert_eq!(out.len(), spec.param_count());
    let h = spec.hidden;
    let a_in = (6.0 / (1 + h) as f64).sqrt();
    let a_rec = (6.0 / (h + h) as f64).sqrt();
    let mut off = 0;
    for _gate in 0..3 {
        for slot in out[off..off + h].iter_mut() {
            *slot = rng.gen_range(-a_in..a_in);
        }
        off += h;
        for slot in out[off..off + h * h].iter_mut() {
            *slot = rng.gen_range(-a_rec..a_rec);
        }
        off += h * h;
        for slot in out[off..off + h].iter_mut() {
            *slot = 0.0;
        }
        off += h;
    }
}

/// Reads weights either as trainable leaves or as constants, offset by the
/// network's base index in the global parameter vector.
#[derive(Clone, Copy)]
pub struct Wire<'a> {
    pub params: &'a [f64],
    pub base: usize,
    pub trainable: bool,
}

impl<'a> Wire<'a> {
    pub fn new(params: &'a [f64], base: usize, trainable: bool) -> Self {
        Wire {
            params,
            base,
            trainable,
        }
    }

    #[inline]
    pub fn node(&self, tape: &mut Tape, local: usize) -> ExprId {
        let idx = self.base + local;
        if self.trainable {
            tape.param(idx as u32, self.params[idx])
        } else {
            tape.constant(self.params[idx])
        }
    }

    #[inline]
    pub fn value(&self, local: usize) -> f64 {
        self.params[self.base + local]
    }
}

/// Graph-side sigmoid via tanh: `0.5 + 0.5 * tanh(x / 2)`.
pub(crate) fn sigmoid_node(tape: &mut Tape, x: ExprId) -> ExprId {
    let half = tape.constant(0.5);
    let xh = tape.mul(x, half);
    let th = tape.tanh(xh);
    let one = tape.one();
    let sum = tape.add(one, th);
    tape.mul(sum, half)
}

/// Plain GRU pass over a scalar sequence; returns the final hidden state.
/// Weight layout per gate (update, reset, candidate): input weights (h),
/// recurrent matrix (h x h, row-major), bias (h).
pub fn gru_encode(spec: &GruSpec, weights: &[f64], seq: &[f64]) -> Result<Vec<f64>, NnError> {
    if weights.len() != spec.param_count() {
        return Err(NnError::Shape {
            what: "gru weights",
            left: weights.len(),
            right: spec.param_count(),
        });
    }
    let h = spec.hidden;
    let gate = h + h * h + h;
    let (wz, uz, bz) = split_gate(&weights[0..gate], h);
    let (wr, ur, br) = split_gate(&weights[gate..2 * gate], h);
    let (wc, uc, bc) = split_gate(&weights[2 * gate..3 * gate], h);
    let sig = |x: f64| 0.5 + 0.5 * (0.5 * x).tanh();
    let mut hid = vec![0.0; h];
    let mut z = vec![0.0; h];
    let mut r = vec![0.0; h];
    let mut cand = vec![0.0; h];
    for &x in seq {
        for i in 0..h {
            let mut az = wz[i] * x + bz[i];
            let mut ar = wr[i] * x + br[i];
            for j in 0..h {
                az += uz[i * h + j] * hid[j];
                ar += ur[i * h + j] * hid[j];
            }
            z[i] = sig(az);
            r[i] = sig(ar);
        }
        for i in 0..h {
            let mut ac = wc[i] * x + bc[i];
            for j in 0..h {
                ac += uc[i * h + j] * (r[j] * hid[j]);
            }
            cand[i] = ac.tanh();
        }
        for i in 0..h {
            hid[i] = (1.0 - z[i]) * hid[i] + z[i] * cand[i];
        }
    }
    Ok(hid)
}

fn split_gate(seg: &[f64], h: usize) -> (&[f64], &[f64], &[f64]) {
    (&seg[0..h], &seg[h..h + h * h], &seg[h + h * h..])
}

/// Graph-side GRU pass; same layout and update rule as [`gru_encode`].
pub(crate) fn trace_gru(
    tape: &mut Tape,
    wire: Wire<'_>,
    gru_off: usize,
    spec: &GruSpec,
    seq: &[f64],
) -> Vec<ExprId> {
    let h = spec.hidden;
    let gate = h + h * h + h;
    let zero = tape.zero();
    let mut hid = vec![zero; h];
    let idx_w = |g: usize, i: usize| gru_off + g * gate + i;
    let idx_u = |g: usize, i: usize, j: usize| gru_off + g * gate + h + i * h + j;
    let idx_b = |g: usize, i: usize| gru_off + g * gate + h + h * h + i;
    for &x in seq {
        let xn = tape.constant(x);
        let mut z = Vec::with_capacity(h);
        let mut r = Vec::with_capacity(h);
        for i in 0..h {
            let mut az_pairs = Vec::with_capacity(h + 1);
            let mut ar_pairs = Vec::with_capacity(h + 1);
            let wzi = wire.node(tape, idx_w(0, i));
            let wri = wire.node(tape, idx_w(1, i));
            az_pairs.push((xn, wzi));
            ar_pairs.push((xn, wri));
            for (j, &hj) in hid.iter().enumerate() {
                let uzij = wire.node(tape, idx_u(0, i, j));
                let urij = wire.node(tape, idx_u(1, i, j));
                az_pairs.push((hj, uzij));
                ar_pairs.push((hj, urij));
            }
            let bzi = wire.node(tape, idx_b(0, i));
            let bri = wire.node(tape, idx_b(1, i));
            let az = tape.dot(&az_pairs, Some(bzi));
            let ar = tape.dot(&ar_pairs, Some(bri));
            z.push(sigmoid_node(tape, az));
            r.push(sigmoid_node(tape, ar));
        }
        let rh: Vec<ExprId> = r
            .iter()
            .zip(&hid)
            .map(|(&ri, &hj)| tape.mul_s(ri, hj))
            .collect();
        let mut cand = Vec::with_capacity(h);
        for i in 0..h {
            let wci = wire.node(tape, idx_w(2, i));
            let mut pairs = Vec::with_capacity(h + 1);
            pairs.push((xn, wci));
            for (j, &rhj) in rh.iter().enumerate() {
                let ucij = wire.node(tape, idx_u(2, i, j));
                pairs.push((rhj, ucij));
            }
            let bci = wire.node(tape, idx_b(2, i));
            let ac = tape.dot(&pairs, Some(bci));
            cand.push(tape.tanh(ac));
        }
        let one = tape.one();
        let mut next = Vec::with_capacity(h);
        for i in 0..h {
            let omz = tape.sub(one, z[i]);
            let keep = tape.mul_s(omz, hid[i]);
            let take = tape.mul(z[i], cand[i]);
            next.push(tape.add_s(keep, take));
        }
        hid = next;
    }
    hid
}
