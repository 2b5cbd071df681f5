//! The trajectory-reconstruction network: a tanh trunk mapping (encoded) time
//! to the two normalized states, modulated per hidden unit by an input-signal
//! context vector.
//!
//! The context comes from a GRU pass over a subsampled window of the
//! trajectory's normalized input signal; two linear generators per hidden
//! layer turn it into feature-wise scales (gamma, initialized to exactly 1)
//! and shifts (beta, initialized to 0), so a fresh network starts as an
//! unmodulated trunk.
//!
//! The context is traced once per trajectory on its own tape; per-point
//! traces receive the modulation either as live nodes (same tape) or as
//! injected constants (separate tape, with adjoints carried across by the
//! trainer).

use super::{
    rff_encode, standard_normal, trace_gru, xavier_gru, xavier_mlp, GruSpec, MlpSpec, NnError,
    RffSpec, Wire,
};
use crate::autodiff::{Dual, ExprId, Tape};
use crate::surrogate::Normalization;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolutionNetSpec {
    /// Trunk hidden widths (tanh layers).
    pub hidden: Vec<usize>,
    /// GRU hidden size; 0 disables input conditioning entirely.
    pub gru_hidden: usize,
    /// Maximum number of input samples fed to the GRU per trajectory.
    pub context_len: usize,
    /// Optional Fourier time features; `None` feeds normalized time raw.
    pub rff: Option<RffSpec>,
}

impl Default for SolutionNetSpec {
    fn default() -> Self {
        SolutionNetSpec {
            hidden: vec![48, 48],
            gru_hidden: 12,
            context_len: 64,
            rff: Some(RffSpec { count: 16, sigma: 4.0 }),
        }
    }
}

impl SolutionNetSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden.is_empty() {
            return Err(NnError::BadSpec("trunk needs at least one hidden layer".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(NnError::BadSpec("trunk hidden width of zero".into()));
        }
        if self.gru_hidden > 0 && self.context_len == 0 {
            return Err(NnError::BadSpec(
                "conditioning enabled but context length is zero".into(),
            ));
        }
        if let Some(r) = &self.rff {
            if r.count == 0 || !(r.sigma > 0.0) {
                return Err(NnError::BadSpec(
                    "Fourier features need count > 0 and sigma > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-layer modulation values: `(gamma, beta)` per trunk hidden layer.
/// Empty when conditioning is disabled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilmValues {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Per-layer modulation graph nodes, same shape as [`FilmValues`].
#[derive(Clone, Debug, Default)]
pub struct FilmNodes {
    pub layers: Vec<(Vec<ExprId>, Vec<ExprId>)>,
}

impl FilmValues {
    /// Re-creates the modulation on another tape as constants.
    pub fn inject(&self, tape: &mut Tape) -> FilmNodes {
        FilmNodes {
            layers: self
                .layers
                .iter()
                .map(|(g, b)| {
                    (
                        g.iter().map(|&x| tape.constant(x)).collect(),
                        b.iter().map(|&x| tape.constant(x)).collect(),
                    )
                })
                .collect(),
        }
    }

    /// Flattened layer-major view: per layer all gammas, then all betas.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (g, b) in &self.layers {
            out.extend_from_slice(g);
            out.extend_from_slice(b);
        }
        out
    }
}

impl FilmNodes {
    /// Reads current values off the owning tape.
    pub fn values(&self, tape: &Tape) -> FilmValues {
        FilmValues {
            layers: self
                .layers
                .iter()
                .map(|(g, b)| {
                    (
                        g.iter().map(|&n| tape.value(n)).collect(),
                        b.iter().map(|&n| tape.value(n)).collect(),
                    )
                })
                .collect(),
        }
    }

    /// Node ids in the same order as [`FilmValues::flat`].
    pub fn flat(&self) -> Vec<ExprId> {
        let mut out = Vec::new();
        for (g, b) in &self.layers {
            out.extend_from_slice(g);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Result of tracing the conditioning stage on a tape.
pub struct ContextTrace {
    pub nodes: FilmNodes,
    pub values: FilmValues,
}

/// Duals for the reconstructed states at one time point, in physical units.
/// Tangents are derivatives with respect to physical time (zero nodes when
/// the trace was built without tangents).
pub struct PointTrace {
    pub y: Dual,
    pub v: Dual,
}

#[derive(Clone, Debug)]
pub struct SolutionNet {
    pub spec: SolutionNetSpec,
    /// Frozen Fourier frequencies; empty when `spec.rff` is `None`.
    pub freqs: Vec<f64>,
    trunk: MlpSpec,
    film_off: usize,
    trunk_off: usize,
    n_params: usize,
}

impl SolutionNet {
    /// Builds the layout around externally supplied frequencies (restore path).
    pub fn with_freqs(spec: SolutionNetSpec, freqs: Vec<f64>) -> Result<Self, NnError> {
        spec.validate()?;
        let want = spec.rff.map(|r| r.count).unwrap_or(0);
        if freqs.len() != want {
            return Err(NnError::Shape {
                what: "fourier frequencies",
                left: freqs.len(),
                right: want,
            });
        }
        let inputs = if want > 0 { 2 * want } else { 1 };
        let trunk = MlpSpec {
            inputs,
            hidden: spec.hidden.clone(),
            outputs: 2,
        };
        let gru_params = if spec.gru_hidden > 0 {
            GruSpec {
                hidden: spec.gru_hidden,
            }
            .param_count()
        } else {
            0
        };
        let film_params = if spec.gru_hidden > 0 {
            spec.hidden
                .iter()
                .map(|&w| 2 * w * (spec.gru_hidden + 1))
                .sum()
        } else {
            0
        };
        let film_off = gru_params;
        let trunk_off = film_off + film_params;
        let n_params = trunk_off + trunk.param_count();
        Ok(SolutionNet {
            spec,
            freqs,
            trunk,
            film_off,
            trunk_off,
            n_params,
        })
    }

    /// Fresh layout with frequencies drawn from N(0, sigma^2).
    pub fn fresh(spec: SolutionNetSpec, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        spec.validate()?;
        let freqs = match spec.rff {
            Some(r) => (0..r.count).map(|_| r.sigma * standard_normal(rng)).collect(),
            None => Vec::new(),
        };
        Self::with_freqs(spec, freqs)
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    /// Writes initial weights into `out` (the net's own segment): Xavier for
    /// GRU and trunk, zeros for the modulation generators so gamma starts at
    /// exactly 1 and beta at 0.
    pub fn init_weights(&self, out: &mut [f64], rng: &mut ChaCha8Rng) {
        assert_eq!(out.len(), self.n_params);
        if self.spec.gru_hidden > 0 {
            xavier_gru(
                &GruSpec {
                    hidden: self.spec.gru_hidden,
                },
                &mut out[0..self.film_off],
                rng,
            );
        }
        for slot in out[self.film_off..self.trunk_off].iter_mut() {
            *slot = 0.0;
        }
        xavier_mlp(&self.trunk, &mut out[self.trunk_off..], rng);
    }

    /// Local offset of a modulation generator block for hidden layer `l`:
    /// gamma matrix (w x gh), gamma bias (w), beta matrix (w x gh), beta
    /// bias (w).
    fn film_layer_off(&self, l: usize) -> usize {
        let gh = self.spec.gru_hidden;
        self.film_off
            + self.spec.hidden[..l]
                .iter()
                .map(|&w| 2 * w * (gh + 1))
                .sum::<usize>()
    }

    /// Value-path conditioning: GRU over the (already normalized, already
    /// subsampled) input samples, then the linear generators.
    pub fn context_values(&self, weights: &[f64], base: usize, u_seq: &[f64]) -> FilmValues {
        if self.spec.gru_hidden == 0 {
            return FilmValues::default();
        }
        let gh = self.spec.gru_hidden;
        let seg = &weights[base..base + self.n_params];
        let ctx = super::gru_encode(&GruSpec { hidden: gh }, &seg[0..self.film_off], u_seq)
            .expect("gru segment length is fixed by the layout");
        let mut layers = Vec::with_capacity(self.spec.hidden.len());
        for (l, &w) in self.spec.hidden.iter().enumerate() {
            let off = self.film_layer_off(l);
            let ag = &seg[off..off + w * gh];
            let bg = &seg[off + w * gh..off + w * (gh + 1)];
            let ab = &seg[off + w * (gh + 1)..off + w * (2 * gh + 1)];
            let bb = &seg[off + w * (2 * gh + 1)..off + 2 * w * (gh + 1)];
            let mut gamma = vec![0.0; w];
            let mut beta = vec![0.0; w];
            for i in 0..w {
                let mut g = bg[i];
                let mut b = bb[i];
                for (j, c) in ctx.iter().enumerate() {
                    g += ag[i * gh + j] * c;
                    b += ab[i * gh + j] * c;
                }
                gamma[i] = 1.0 + g;
                beta[i] = b;
            }
            layers.push((gamma, beta));
        }
        FilmValues { layers }
    }

    /// Graph-path conditioning on `tape`; `u_seq` as in [`Self::context_values`].
    pub fn trace_context(&self, tape: &mut Tape, wire: Wire<'_>, u_seq: &[f64]) -> ContextTrace {
        if self.spec.gru_hidden == 0 {
            return ContextTrace {
                nodes: FilmNodes::default(),
                values: FilmValues::default(),
            };
        }
        let gh = self.spec.gru_hidden;
        let ctx = trace_gru(tape, wire, 0, &GruSpec { hidden: gh }, u_seq);
        let one = tape.one();
        let mut layers = Vec::with_capacity(self.spec.hidden.len());
        for (l, &w) in self.spec.hidden.iter().enumerate() {
            let off = self.film_layer_off(l);
            let mut gamma = Vec::with_capacity(w);
            let mut beta = Vec::with_capacity(w);
            for i in 0..w {
                let mut g_pairs = Vec::with_capacity(gh);
                let mut b_pairs = Vec::with_capacity(gh);
                for (j, &c) in ctx.iter().enumerate() {
                    let agij = wire.node(tape, off + i * gh + j);
                    let abij = wire.node(tape, off + w * (gh + 1) + i * gh + j);
                    g_pairs.push((c, agij));
                    b_pairs.push((c, abij));
                }
                let bgi = wire.node(tape, off + w * gh + i);
                let bbi = wire.node(tape, off + w * (2 * gh + 1) + i);
                let g_lin = tape.dot(&g_pairs, Some(bgi));
                gamma.push(tape.add(one, g_lin));
                beta.push(tape.dot(&b_pairs, Some(bbi)));
            }
            layers.push((gamma, beta));
        }
        let nodes = FilmNodes { layers };
        let values = nodes.values(tape);
        ContextTrace { nodes, values }
    }

    /// Graph-path reconstruction at physical time `t`. Modulation nodes come
    /// from [`Self::trace_context`] (same tape) or [`FilmValues::inject`]
    /// (separate point tape). With `with_tangent`, the returned duals carry
    /// d/dt in physical units; without, tangents are the interned zero.
    pub fn trace_point(
        &self,
        tape: &mut Tape,
        wire: Wire<'_>,
        film: &FilmNodes,
        norm: &Normalization,
        t: f64,
        with_tangent: bool,
    ) -> PointTrace {
        let conditioned = self.spec.gru_hidden > 0;
        debug_assert_eq!(
            film.layers.len(),
            if conditioned { self.spec.hidden.len() } else { 0 }
        );
        // Normalized time as a dual; d(t_n)/dt = 1/scale folded into the seed.
        let inv_t = 1.0 / norm.t.scale;
        let tn_v = tape.constant((t - norm.t.offset) * inv_t);
        let tn_t = if with_tangent {
            tape.constant(inv_t)
        } else {
            tape.zero()
        };
        let tn = Dual { v: tn_v, t: tn_t };
        // Input features.
        let feats: Vec<Dual> = if self.freqs.is_empty() {
            vec![tn]
        } else {
            let tau = 2.0 * std::f64::consts::PI;
            let mut f = Vec::with_capacity(2 * self.freqs.len());
            for &b in &self.freqs {
                let wnode = tape.constant(tau * b);
                let arg = tape.d_scale(tn, wnode);
                f.push(tape.d_cos(arg));
            }
            for &b in &self.freqs {
                let wnode = tape.constant(tau * b);
                let arg = tape.d_scale(tn, wnode);
                f.push(tape.d_sin(arg));
            }
            f
        };
        // Trunk with per-layer modulation on the pre-activations.
        let sizes = self.trunk.sizes();
        let mut act = feats;
        let mut off = self.trunk_off;
        let n_layers = sizes.len() - 1;
        for l in 0..n_layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let mut next = Vec::with_capacity(n_out);
            for i in 0..n_out {
                let mut pairs = Vec::with_capacity(n_in);
                for (j, &a) in act.iter().enumerate() {
                    let wij = wire.node(tape, off + i * n_in + j);
                    pairs.push((a, wij));
                }
                let bi = wire.node(tape, off + n_out * n_in + i);
                let mut pre = tape.d_dot(&pairs, Some(bi));
                if l + 1 < n_layers {
                    if conditioned {
                        let (ref gamma, ref beta) = film.layers[l];
                        let hv = tape.mul_s(gamma[i], pre.v);
                        let hv = tape.add_s(hv, beta[i]);
                        let ht = tape.mul_s(gamma[i], pre.t);
                        pre = Dual { v: hv, t: ht };
                    }
                    next.push(tape.d_tanh(pre));
                } else {
                    next.push(pre);
                }
            }
            act = next;
            off += n_out * (n_in + 1);
        }
        // Back to physical units: x = offset + scale * x_n.
        let unscale = |tape: &mut Tape, d: Dual, offset: f64, scale: f64| {
            let s = tape.constant(scale);
            let o = tape.constant(offset);
            let v = tape.mul_s(d.v, s);
            let v = tape.add_s(v, o);
            let tg = tape.mul_s(d.t, s);
            Dual { v, t: tg }
        };
        let y = unscale(tape, act[0], norm.y.offset, norm.y.scale);
        let v = unscale(tape, act[1], norm.v.offset, norm.v.scale);
        PointTrace { y, v }
    }

    /// Value-path reconstruction at physical time `t` (fast path for
    /// evaluation); must agree with [`Self::trace_point`] to rounding.
    pub fn reconstruct(
        &self,
        weights: &[f64],
        base: usize,
        film: &FilmValues,
        norm: &Normalization,
        t: f64,
    ) -> crate::surrogate::State {
        let seg = &weights[base..base + self.n_params];
        let tn = (t - norm.t.offset) / norm.t.scale;
        let feats: Vec<f64> = if self.freqs.is_empty() {
            vec![tn]
        } else {
            rff_encode(tn, &self.freqs)
        };
        let sizes = self.trunk.sizes();
        let n_layers = sizes.len() - 1;
        let mut act = feats;
        let mut off = self.trunk_off;
        for l in 0..n_layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &seg[off..off + n_out * n_in];
            let b = &seg[off + n_out * n_in..off + n_out * (n_in + 1)];
            off += n_out * (n_in + 1);
            let mut next = vec![0.0; n_out];
            for (i, target) in next.iter_mut().enumerate() {
                let mut acc = b[i];
                for (x, wij) in act.iter().zip(&w[i * n_in..(i + 1) * n_in]) {
                    acc += x * wij;
                }
                if l + 1 < n_layers {
                    if !film.layers.is_empty() {
                        let (ref gamma, ref beta) = film.layers[l];
                        acc = gamma[i] * acc + beta[i];
                    }
                    *target = acc.tanh();
                } else {
                    *target = acc;
                }
            }
            act = next;
        }
        crate::surrogate::State {
            y: norm.y.offset + norm.y.scale * act[0],
            v: norm.v.offset + norm.v.scale * act[1],
        }
    }
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
                offset: 1.0,
                scale: 2.0,
            },
            y: Affine {
                offset: 0.3,
                scale: 1.7,
            },
            v: Affine {
                offset: -0.2,
                scale: 2.5,
            },
            u: Affine {
                offset: 0.0,
                scale: 1.0,
            },
        }
    }

    fn toy_net(rff: bool) -> (SolutionNet, Vec<f64>) {
        let spec = SolutionNetSpec {
            hidden: vec![6, 5],
            gru_hidden: 3,
            context_len: 16,
            rff: if rff {
                Some(RffSpec {
                    count: 4,
                    sigma: 1.0,
                })
            } else {
                None
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = SolutionNet::fresh(spec, &mut rng).unwrap();
        let mut w = vec![0.0; net.param_count()];
        net.init_weights(&mut w, &mut rng);
        (net, w)
    }

    #[test]
    fn fresh_modulation_is_exactly_identity() {
        let (net, w) = toy_net(false);
        let film = net.context_values(&w, 0, &[0.4, -0.7, 1.2]);
        for (gamma, beta) in &film.layers {
            for g in gamma {
                assert_eq!(*g, 1.0);
            }
            for b in beta {
                assert_eq!(*b, 0.0);
            }
        }
    }

    #[test]
    fn context_graph_matches_value_path() {
        let (net, mut w) = toy_net(false);
        // Perturb the generator weights so the modulation is nontrivial.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for slot in w.iter_mut() {
            *slot += rng.gen_range(-0.3..0.3);
        }
        let seq = [0.4, -0.7, 1.2, 0.1];
        let value = net.context_values(&w, 0, &seq);
        let mut tape = Tape::new();
        let trace = net.trace_context(&mut tape, Wire::new(&w, 0, false), &seq);
        assert_eq!(trace.values.layers.len(), value.layers.len());
        for (a, b) in trace.values.flat().iter().zip(value.flat().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn point_graph_matches_value_path_with_and_without_rff() {
        for rff in [false, true] {
            let (net, mut w) = toy_net(rff);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for slot in w.iter_mut() {
                *slot += rng.gen_range(-0.2..0.2);
            }
            let norm = toy_norm();
            let film = net.context_values(&w, 0, &[0.9, -0.2]);
            let mut tape = Tape::new();
            let nodes = film.inject(&mut tape);
            for t in [0.0, 0.37, 1.9] {
                let trace =
                    net.trace_point(&mut tape, Wire::new(&w, 0, false), &nodes, &norm, t, false);
                let state = net.reconstruct(&w, 0, &film, &norm, t);
                assert!((tape.value(trace.y.v) - state.y).abs() < 1e-12);
                assert!((tape.value(trace.v.v) - state.v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_tangent_matches_finite_difference_in_time() {
        for rff in [false, true] {
            let (net, mut w) = toy_net(rff);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            for slot in w.iter_mut() {
                *slot += rng.gen_range(-0.2..0.2);
            }
            let norm = toy_norm();
            let film = net.context_values(&w, 0, &[0.2, 0.8, -0.4]);
            let mut tape = Tape::new();
            let nodes = film.inject(&mut tape);
            let t = 0.63;
            let trace = net.trace_point(&mut tape, Wire::new(&w, 0, false), &nodes, &norm, t, true);
            let eps = 1e-6;
            let p = net.reconstruct(&w, 0, &film, &norm, t + eps);
            let m = net.reconstruct(&w, 0, &film, &norm, t - eps);
            let fd_y = (p.y - m.y) / (2.0 * eps);
            let fd_v = (p.v - m.v) / (2.0 * eps);
            assert!(
                (tape.value(trace.y.t) - fd_y).abs() < 1e-6 * fd_y.abs().max(1.0),
                "dy/dt mismatch (rff={rff})"
            );
            assert!(
                (tape.value(trace.v.t) - fd_v).abs() < 1e-6 * fd_v.abs().max(1.0),
                "dv/dt mismatch (rff={rff})"
            );
        }
    }

    #[test]
    fn unconditioned_net_ignores_context() {
        let spec = SolutionNetSpec {
            hidden: vec![8],
            gru_hidden: 0,
            context_len: 0,
            rff: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = SolutionNet::fresh(spec, &mut rng).unwrap();
        let mut w = vec![0.0; net.param_count()];
        net.init_weights(&mut w, &mut rng);
        let film = net.context_values(&w, 0, &[1.0, 2.0, 3.0]);
        assert!(film.layers.is_empty());
        let norm = toy_norm();
        let s = net.reconstruct(&w, 0, &film, &norm, 0.5);
        assert!(s.y.is_finite() && s.v.is_finite());
    }

    #[test]
    fn weight_gradients_match_finite_differences_through_both_tapes() {
        // End-to-end composition the trainer relies on: context traced on one
        // tape, the point on another with injected constants, adjoints routed
        // back through the context tape by seeding its outputs.
        let (net, mut w) = toy_net(false);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for slot in w.iter_mut() {
            *slot += rng.gen_range(-0.2..0.2);
        }
        let norm = toy_norm();
        let seq = [0.5, -0.5, 0.25];
        let t = 0.41;
        let objective = |weights: &[f64]| -> f64 {
            let film = net.context_values(weights, 0, &seq);
            let s = net.reconstruct(weights, 0, &film, &norm, t);
            s.y + 2.0 * s.v
        };

        let mut ctx_tape = Tape::new();
        let trace = net.trace_context(&mut ctx_tape, Wire::new(&w, 0, true), &seq);
        let mut pt_tape = Tape::new();
        let nodes = trace.values.inject(&mut pt_tape);
        let pt = net.trace_point(&mut pt_tape, Wire::new(&w, 0, true), &nodes, &norm, t, false);
        let mut grads = GradientMap::zeros(w.len());
        pt_tape
            .backward_seeded(&[(pt.y.v, 1.0), (pt.v.v, 2.0)], &mut grads)
            .unwrap();
        // Carry film adjoints from the point tape into the context tape.
        let flat_nodes = nodes.flat();
        let ctx_nodes = trace.nodes.flat();
        let seeds: Vec<(crate::autodiff::ExprId, f64)> = ctx_nodes
            .iter()
            .zip(&flat_nodes)
            .map(|(&cn, &pn)| (cn, pt_tape.adjoint(pn)))
            .collect();
        ctx_tape.backward_seeded(&seeds, &mut grads).unwrap();

        let eps = 1e-6;
        let mut checked = 0;
        // Spot-check a spread of weights across all three segments.
        for i in (0..w.len()).step_by(17) {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (objective(&wp) - objective(&wm)) / (2.0 * eps);
            let ad = grads.get(i);
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((ad - fd) / denom).abs() < 1e-4,
                "weight {i}: ad {ad} fd {fd}"
            );
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn frequency_count_must_match_spec() {
        let spec = SolutionNetSpec {
            hidden: vec![4],
            gru_hidden: 0,
            context_len: 0,
            rff: Some(RffSpec {
                count: 3,
                sigma: 1.0,
            }),
        };
        assert!(SolutionNet::with_freqs(spec, vec![1.0, 2.0]).is_err());
    }
}
