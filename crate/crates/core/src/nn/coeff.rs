//! The coefficient map: (y, v, u) -> (k, d, g), the state-dependent
//! stiffness, damping, and input gain of the second-order form.
//!
//! Inputs are normalized with the dataset's affine transforms and optionally
//! expanded by the fixed feature set of [`augment_state`](super::augment_state);
//! outputs are in physical units. The head is either a single MLP or a
//! softmax-gated mixture of expert MLPs.
//!
//! The graph trace takes its inputs as live tape nodes: during
//! solution-network phases the coefficients' weights are constants but their
//! inputs carry gradients (state sensitivity), and during coefficient phases
//! it is the reverse.

use super::{mlp_forward, moe_combine, xavier_mlp, MlpSpec, NnError, Wire, AUGMENTED_FEATURES, RAW_FEATURES};
use crate::autodiff::{ExprId, Tape};
use crate::surrogate::{Coefficients, Normalization, State};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeSpec {
    pub experts: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoeffNetSpec {
    /// Hidden widths of each expert MLP.
    pub hidden: Vec<usize>,
    /// Expand normalized (y, v, u) to the fixed nine-feature set.
    pub augment: bool,
    /// Mixture-of-experts head; `None` uses a single MLP.
    pub moe: Option<MoeSpec>,
}

impl Default for CoeffNetSpec {
    fn default() -> Self {
        CoeffNetSpec {
            hidden: vec![24, 24],
            augment: true,
            moe: None,
        }
    }
}

impl CoeffNetSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden.is_empty() {
            return Err(NnError::BadSpec(
                "coefficient map needs at least one hidden layer".into(),
            ));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(NnError::BadSpec("coefficient hidden width of zero".into()));
        }
        if let Some(m) = &self.moe {
            if m.experts == 0 {
                return Err(NnError::BadSpec("mixture with zero experts".into()));
            }
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        if self.augment {
            AUGMENTED_FEATURES
        } else {
            RAW_FEATURES
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoeffNet {
    pub spec: CoeffNetSpec,
    expert: MlpSpec,
    n_experts: usize,
    /// Local offset of the gate parameters (weights then biases); equals
    /// `n_params` when there is no gate.
    gate_off: usize,
    n_params: usize,
}

impl CoeffNet {
    pub fn new(spec: CoeffNetSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let expert = MlpSpec {
            inputs: spec.features(),
            hidden: spec.hidden.clone(),
            outputs: 3,
        };
        let n_experts = spec.moe.map(|m| m.experts).unwrap_or(1);
        let gate_off = n_experts * expert.param_count();
        let gate_params = if n_experts > 1 {
            n_experts * expert.inputs + n_experts
        } else {
            0
        };
        Ok(CoeffNet {
            spec,
            expert,
            n_experts,
            gate_off,
            n_params: gate_off + gate_params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    /// Xavier experts; the gate starts at zero so a fresh mixture averages
    /// its experts uniformly.
    pub fn init_weights(&self, out: &mut [f64], rng: &mut ChaCha8Rng) {
        assert_eq!(out.len(), self.n_params);
        let per = self.expert.param_count();
        for e in 0..self.n_experts {
            xavier_mlp(&self.expert, &mut out[e * per..(e + 1) * per], rng);
        }
        for slot in out[self.gate_off..].iter_mut() {
            *slot = 0.0;
        }
    }

    /// Normalized (and optionally augmented) input features.
    pub fn features(&self, norm: &Normalization, y: f64, v: f64, u: f64) -> Vec<f64> {
        let yn = norm.y.normalize(y);
        let vn = norm.v.normalize(v);
        let un = norm.u.normalize(u);
        if self.spec.augment {
            super::augment_state(yn, vn, un).to_vec()
        } else {
            vec![yn, vn, un]
        }
    }

    /// Value-path coefficients in physical units.
    pub fn coefficients(
        &self,
        weights: &[f64],
        base: usize,
        norm: &Normalization,
        y: f64,
        v: f64,
        u: f64,
    ) -> Coefficients {
        let seg = &weights[base..base + self.n_params];
        let feats = self.features(norm, y, v, u);
        let per = self.expert.param_count();
        let out = if self.n_experts == 1 {
            mlp_forward(&self.expert, &seg[0..per], &feats)
                .expect("expert segment length fixed by layout")
        } else {
            let experts: Vec<Vec<f64>> = (0..self.n_experts)
                .map(|e| {
                    mlp_forward(&self.expert, &seg[e * per..(e + 1) * per], &feats)
                        .expect("expert segment length fixed by layout")
                })
                .collect();
            let nf = self.expert.inputs;
            let gw = &seg[self.gate_off..self.gate_off + self.n_experts * nf];
            let gb = &seg[self.gate_off + self.n_experts * nf..];
            let logits: Vec<f64> = (0..self.n_experts)
                .map(|e| {
                    let mut acc = gb[e];
                    for (x, w) in feats.iter().zip(&gw[e * nf..(e + 1) * nf]) {
                        acc += x * w;
                    }
                    acc
                })
                .collect();
            moe_combine(&logits, &experts).expect("gate and expert counts match")
        };
        Coefficients {
            k: out[0],
            d: out[1],
            g: out[2],
        }
    }

    /// Closure adapter for rollout integration.
    pub fn evaluator<'a>(
        &'a self,
        weights: &'a [f64],
        base: usize,
        norm: &'a Normalization,
    ) -> impl Fn(State, f64) -> Coefficients + 'a {
        move |x: State, u: f64| self.coefficients(weights, base, norm, x.y, x.v, u)
    }

    /// Graph-path coefficients; `y`, `v`, `u` are live nodes on `tape`.
    /// Returns `[k, d, g]` nodes in physical units.
    pub fn trace(
        &self,
        tape: &mut Tape,
        wire: Wire<'_>,
        norm: &Normalization,
        y: ExprId,
        v: ExprId,
        u: ExprId,
    ) -> [ExprId; 3] {
        let normalize = |tape: &mut Tape, x: ExprId, a: &crate::surrogate::Affine| {
            let off = tape.constant(a.offset);
            let inv = tape.constant(1.0 / a.scale);
            let centered = tape.sub(x, off);
            tape.mul_s(centered, inv)
        };
        let yn = normalize(tape, y, &norm.y);
        let vn = normalize(tape, v, &norm.v);
        let un = normalize(tape, u, &norm.u);
        let feats: Vec<ExprId> = if self.spec.augment {
            let y2 = tape.square(yn);
            let y3 = tape.mul(y2, yn);
            let v2 = tape.square(vn);
            let ay = tape.abs(yn);
            let av = tape.abs(vn);
            let yv = tape.mul(yn, vn);
            vec![yn, vn, un, y2, y3, v2, ay, av, yv]
        } else {
            vec![yn, vn, un]
        };
        let per = self.expert.param_count();
        if self.n_experts == 1 {
            let out = trace_mlp(tape, wire, 0, &self.expert, &feats);
            return [out[0], out[1], out[2]];
        }
        let expert_outs: Vec<Vec<ExprId>> = (0..self.n_experts)
            .map(|e| trace_mlp(tape, wire, e * per, &self.expert, &feats))
            .collect();
        // Max-stabilized softmax gate.
        let nf = self.expert.inputs;
        let logits: Vec<ExprId> = (0..self.n_experts)
            .map(|e| {
                let pairs: Vec<(ExprId, ExprId)> = feats
                    .iter()
                    .enumerate()
                    .map(|(j, &f)| (f, wire.node(tape, self.gate_off + e * nf + j)))
                    .collect();
                let b = wire.node(tape, self.gate_off + self.n_experts * nf + e);
                tape.dot(&pairs, Some(b))
            })
            .collect();
        let mut m = logits[0];
        for &l in &logits[1..] {
            m = tape.max(m, l);
        }
        let exps: Vec<ExprId> = logits
            .iter()
            .map(|&l| {
                let c = tape.sub(l, m);
                tape.exp(c)
            })
            .collect();
        let mut z = exps[0];
        for &e in &exps[1..] {
            z = tape.add_s(z, e);
        }
        let inv_z = tape.recip(z);
        let alphas: Vec<ExprId> = exps.iter().map(|&e| tape.mul(e, inv_z)).collect();
        let mut out = [tape.zero(); 3];
        for (c, slot) in out.iter_mut().enumerate() {
            let pairs: Vec<(ExprId, ExprId)> = alphas
                .iter()
                .zip(&expert_outs)
                .map(|(&a, eo)| (a, eo[c]))
                .collect();
            *slot = tape.dot(&pairs, None);
        }
        out
    }
}

/// Plain MLP trace on live nodes: tanh hidden, linear output.
fn trace_mlp(
    tape: &mut Tape,
    wire: Wire<'_>,
    local_off: usize,
    spec: &MlpSpec,
    input: &[ExprId],
) -> Vec<ExprId> {
    let sizes = spec.sizes();
    let n_layers = sizes.len() - 1;
    let mut act = input.to_vec();
    let mut off = local_off;
    for l in 0..n_layers {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let mut next = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let pairs: Vec<(ExprId, ExprId)> = act
                .iter()
                .enumerate()
                .map(|(j, &a)| (a, wire.node(tape, off + i * n_in + j)))
                .collect();
            let b = wire.node(tape, off + n_out * n_in + i);
            let pre = tape.dot(&pairs, Some(b));
            next.push(if l + 1 < n_layers { tape.tanh(pre) } else { pre });
        }
        act = next;
        off += n_out * (n_in + 1);
    }
    act
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradientMap;
    use crate::surrogate::Affine;
    use rand::{Rng, SeedableRng};

    fn toy_norm() -> Normalization {
        Normalization {
            t: Affine {
                offset: 0.0,
                scale: 1.0,
            },
            y: Affine {
                offset: 0.1,
                scale: 1.4,
            },
            v: Affine {
                offset: -0.3,
                scale: 2.2,
            },
            u: Affine {
                offset: 0.0,
                scale: 0.8,
            },
        }
    }

    fn random_net(augment: bool, experts: usize, seed: u64) -> (CoeffNet, Vec<f64>) {
        let spec = CoeffNetSpec {
            hidden: vec![6, 4],
            augment,
            moe: if experts > 1 {
                Some(MoeSpec { experts })
            } else {
                None
            },
        };
        let net = CoeffNet::new(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; net.param_count()];
        net.init_weights(&mut w, &mut rng);
        // Nudge everything (gate included) off the init point.
        for slot in w.iter_mut() {
            *slot += rng.gen_range(-0.3..0.3);
        }
        (net, w)
    }

    #[test]
    fn param_count_single_and_mixture() {
        let plain = CoeffNet::new(CoeffNetSpec {
            hidden: vec![8],
            augment: false,
            moe: None,
        })
        .unwrap();
        // 3 -> 8 -> 3: 3*8 + 8 + 8*3 + 3 = 59
        assert_eq!(plain.param_count(), 59);
        let moe = CoeffNet::new(CoeffNetSpec {
            hidden: vec![8],
            augment: true,
            moe: Some(MoeSpec { experts: 4 }),
        })
        .unwrap();
        // Expert: 9*8 + 8 + 8*3 + 3 = 107; gate: 4*9 + 4 = 40.
        assert_eq!(moe.param_count(), 4 * 107 + 40);
    }

    #[test]
    fn fresh_mixture_averages_experts() {
        let spec = CoeffNetSpec {
            hidden: vec![5],
            augment: false,
            moe: Some(MoeSpec { experts: 3 }),
        };
        let net = CoeffNet::new(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = vec![0.0; net.param_count()];
        net.init_weights(&mut w, &mut rng);
        let norm = toy_norm();
        let feats = net.features(&norm, 0.7, -0.4, 0.2);
        let per = net.expert.param_count();
        let mut mean = [0.0; 3];
        for e in 0..3 {
            let out = mlp_forward(&net.expert, &w[e * per..(e + 1) * per], &feats).unwrap();
            for c in 0..3 {
                mean[c] += out[c] / 3.0;
            }
        }
        let got = net.coefficients(&w, 0, &norm, 0.7, -0.4, 0.2);
        assert!((got.k - mean[0]).abs() < 1e-12);
        assert!((got.d - mean[1]).abs() < 1e-12);
        assert!((got.g - mean[2]).abs() < 1e-12);
    }

    #[test]
    fn value_path_matches_hand_computation_tiny_net() {
        // 3 features -> [2] -> 3, no augmentation, single expert.
        let spec = CoeffNetSpec {
            hidden: vec![2],
            augment: false,
            moe: None,
        };
        let net = CoeffNet::new(spec).unwrap();
        // Layer 0: W 2x3 rows, b 2; layer 1: W 3x2 rows, b 3.
        let w = vec![
            0.2, -0.1, 0.5, //
            0.3, 0.4, -0.6, //
            0.05, -0.05, //
            1.0, 0.0, //
            0.0, 1.0, //
            0.5, 0.5, //
            0.1, -0.2, 0.3,
        ];
        assert_eq!(w.len(), net.param_count());
        let norm = toy_norm();
        let (y, v, u) = (0.8, -1.0, 0.4);
        let yn = (y - 0.1) / 1.4;
        let vn = (v + 0.3) / 2.2;
        let un = u / 0.8;
        let h0 = (0.2 * yn - 0.1 * vn + 0.5 * un + 0.05f64).tanh();
        let h1 = (0.3 * yn + 0.4 * vn - 0.6 * un - 0.05f64).tanh();
        let expect = [h0 + 0.1, h1 - 0.2, 0.5 * h0 + 0.5 * h1 + 0.3];
        let got = net.coefficients(&w, 0, &norm, y, v, u);
        assert!((got.k - expect[0]).abs() < 1e-15);
        assert!((got.d - expect[1]).abs() < 1e-15);
        assert!((got.g - expect[2]).abs() < 1e-15);
    }

    #[test]
    fn graph_matches_value_path_all_variants() {
        let norm = toy_norm();
        for augment in [false, true] {
            for experts in [1, 3] {
                let (net, w) = random_net(augment, experts, 17);
                let mut tape = Tape::new();
                let y = tape.input("y", 0.9);
                let v = tape.input("v", -0.6);
                let u = tape.input("u", 0.3);
                let out = net.trace(&mut tape, Wire::new(&w, 0, false), &norm, y, v, u);
                let val = net.coefficients(&w, 0, &norm, 0.9, -0.6, 0.3);
                assert!(
                    (tape.value(out[0]) - val.k).abs() < 1e-12,
                    "k (augment={augment}, experts={experts})"
                );
                assert!((tape.value(out[1]) - val.d).abs() < 1e-12);
                assert!((tape.value(out[2]) - val.g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let norm = toy_norm();
        for (augment, experts) in [(false, 1), (true, 3)] {
            let (net, w) = random_net(augment, experts, 23);
            let (y, v, u) = (0.5, -0.2, 0.7);
            let objective = |weights: &[f64]| -> f64 {
                let c = net.coefficients(weights, 0, &norm, y, v, u);
                c.k + 2.0 * c.d - 0.5 * c.g
            };
            let mut tape = Tape::new();
            let yn = tape.constant(y);
            let vn = tape.constant(v);
            let un = tape.constant(u);
            let out = net.trace(&mut tape, Wire::new(&w, 0, true), &norm, yn, vn, un);
            let mut grads = GradientMap::zeros(w.len());
            tape.backward_seeded(&[(out[0], 1.0), (out[1], 2.0), (out[2], -0.5)], &mut grads)
                .unwrap();
            let eps = 1e-6;
            for i in (0..w.len()).step_by(7) {
                let mut wp = w.clone();
                wp[i] += eps;
                let mut wm = w.clone();
                wm[i] -= eps;
                let fd = (objective(&wp) - objective(&wm)) / (2.0 * eps);
                let ad = grads.get(i);
                let denom = ad.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((ad - fd) / denom).abs() < 1e-4,
                    "weight {i}: ad {ad} fd {fd} (augment={augment}, experts={experts})"
                );
            }
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        // State sensitivity is what couples the coefficient map into the
        // solution network's training phase; check d(output)/d(y, v, u).
        let norm = toy_norm();
        let (net, w) = random_net(true, 3, 29);
        let (y, v, u) = (0.31, -0.9, 0.55);
        let mut tape = Tape::new();
        let yi = tape.input("y", y);
        let vi = tape.input("v", v);
        let ui = tape.input("u", u);
        let out = net.trace(&mut tape, Wire::new(&w, 0, false), &norm, yi, vi, ui);
        tape.backward(out[0], &mut GradientMap::zeros(0)).unwrap();
        let (ay, av, au) = (tape.adjoint(yi), tape.adjoint(vi), tape.adjoint(ui));
        let eps = 1e-6;
        let k_at = |y: f64, v: f64, u: f64| net.coefficients(&w, 0, &norm, y, v, u).k;
        let fdy = (k_at(y + eps, v, u) - k_at(y - eps, v, u)) / (2.0 * eps);
        let fdv = (k_at(y, v + eps, u) - k_at(y, v - eps, u)) / (2.0 * eps);
        let fdu = (k_at(y, v, u + eps) - k_at(y, v, u - eps)) / (2.0 * eps);
        for (ad, fd, name) in [(ay, fdy, "y"), (av, fdv, "v"), (au, fdu, "u")] {
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            assert!(((ad - fd) / denom).abs() < 1e-4, "{name}: ad {ad} fd {fd}");
        }
    }

    #[test]
    fn evaluator_closure_matches_direct_call() {
        let norm = toy_norm();
        let (net, w) = random_net(true, 1, 41);
        let f = net.evaluator(&w, 0, &norm);
        let direct = net.coefficients(&w, 0, &norm, 1.1, 0.2, -0.4);
        let via = f(State { y: 1.1, v: 0.2 }, -0.4);
        assert_eq!(direct.k.to_bits(), via.k.to_bits());
        assert_eq!(direct.d.to_bits(), via.d.to_bits());
        assert_eq!(direct.g.to_bits(), via.g.to_bits());
    }
}
