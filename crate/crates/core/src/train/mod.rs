//! Cyclic two-phase training of the surrogate.
//!
//! Training alternates between blocks of solution-network epochs (fit the
//! measurements, the initial condition, and the dynamics residual) and blocks
//! of coefficient-network epochs (fit the residual, sliding-window regression
//! hints, and a smoothness penalty). Each trajectory takes its own Adam step
//! per epoch, in trajectory order, so runs are bit-reproducible.
//!
//! The expensive differentiation graphs are traced once per trajectory and
//! then replayed with updated weights every epoch ([`Tape::replay`]); loss
//! gradients enter the reverse sweep as analytic seed adjoints on the graph's
//! output nodes, so no loss arithmetic lives on the tape. During coefficient
//! blocks the solution network is frozen: its reconstructions are cached as
//! constants and the much smaller coefficient graph is rebuilt per block.

mod baseline;

pub use baseline::{train_baseline, BaselineKind, BaselineModel, BaselineOutput, BaselineSub};

use std::error::Error;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdError, ExprId, GradientMap, Tape};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::loss;
use crate::nn::{CoeffNet, FilmValues, NnError, SolutionNet, Wire};
use crate::ridge::{compute_hints, sample_window_length, Hint};
use crate::surrogate::{Coefficients, Normalization, State};
use crate::systems::{lerp_series, subsample_even, Dataset, Trajectory};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A trained (or freshly initialized) surrogate: both networks, the flat
/// weight vector (solution segment first), and the normalization the
/// networks were trained under.
#[derive(Clone, Debug)]
pub struct Model {
    pub solution: SolutionNet,
    pub coefficient: CoeffNet,
    pub weights: Vec<f64>,
    pub normalization: Normalization,
}

impl Model {
    /// Fresh model with randomly initialized weights. Draw order: solution
    /// network (Fourier frequencies, then weights), coefficient network.
    pub fn init(
        config: &ExperimentConfig,
        normalization: Normalization,
        rng: &mut ChaCha8Rng,
    ) -> Result<Model, NnError> {
        let solution = SolutionNet::fresh(config.solution.clone(), rng)?;
        let coefficient = CoeffNet::new(config.coefficient.clone())?;
        let n_sol = solution.param_count();
        let n_coeff = coefficient.param_count();
        let mut weights = vec![0.0; n_sol + n_coeff];
        solution.init_weights(&mut weights[..n_sol], rng);
        coefficient.init_weights(&mut weights[n_sol..], rng);
        Ok(Model {
            solution,
            coefficient,
            weights,
            normalization,
        })
    }

    /// Index where the coefficient network's segment starts.
    pub fn coefficient_base(&self) -> usize {
        self.solution.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    /// Conditioning sequence for one trajectory: the collocation-grid input
    /// samples, normalized, evenly subsampled to the configured length.
    pub fn context_sequence(&self, traj: &Trajectory) -> Vec<f64> {
        context_sequence(
            &self.normalization,
            traj,
            self.solution.spec.context_len,
        )
    }

    /// Per-trajectory modulation values (value path).
    pub fn context_for(&self, traj: &Trajectory) -> FilmValues {
        let seq = self.context_sequence(traj);
        self.solution.context_values(&self.weights, 0, &seq)
    }

    /// Reconstructed state at time `t` for a trajectory's conditioning.
    pub fn reconstruct(&self, film: &FilmValues, t: f64) -> State {
        self.solution
            .reconstruct(&self.weights, 0, film, &self.normalization, t)
    }

    /// Coefficients at a state/input point (value path).
    pub fn theta(&self, y: f64, v: f64, u: f64) -> Coefficients {
        self.coefficient.coefficients(
            &self.weights,
            self.coefficient_base(),
            &self.normalization,
            y,
            v,
            u,
        )
    }

    /// Closure view of the coefficient field for rollout integration.
    pub fn theta_field(&self) -> impl Fn(State, f64) -> Coefficients + '_ {
        self.coefficient.evaluator(
            &self.weights,
            self.coefficient_base(),
            &self.normalization,
        )
    }
}

/// Normalized, evenly subsampled input samples for conditioning.
pub fn context_sequence(norm: &Normalization, traj: &Trajectory, len: usize) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    subsample_even(&traj.col_u, len)
        .into_iter()
        .map(|u| norm.u.normalize(u))
        .collect()
}

/// First-moment/second-moment buffers of one Adam optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }
}

/// Adam over one contiguous segment of the global weight vector.
struct Adam {
    lo: usize,
    hi: usize,
    lr: f64,
    state: AdamState,
}

impl Adam {
    fn new(lo: usize, hi: usize, lr: f64, state: AdamState) -> Adam {
        debug_assert_eq!(state.m.len(), hi - lo);
        Adam { lo, hi, lr, state }
    }

    fn step(&mut self, weights: &mut [f64], grads: &[f64]) {
        self.state.steps += 1;
        let t = self.state.steps.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (k, i) in (self.lo..self.hi).enumerate() {
            let g = grads[i];
            let m = ADAM_BETA1 * self.state.m[k] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.state.v[k] + (1.0 - ADAM_BETA2) * g * g;
            self.state.m[k] = m;
            self.state.v[k] = v;
            weights[i] -= self.lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        }
    }
}

/// Which network an epoch trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Solution,
    Coefficient,
}

/// Cyclic schedule: `phase1_epochs` solution epochs, then `phase2_epochs`
/// coefficient epochs, repeating.
pub fn phase_of(epoch: usize, phase1_epochs: usize, phase2_epochs: usize) -> Phase {
    if epoch % (phase1_epochs + phase2_epochs) < phase1_epochs {
        Phase::Solution
    } else {
        Phase::Coefficient
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs already completed.
    pub epoch: usize,
    /// Live (decayed) hint weight.
    pub lambda_hint: f64,
    pub solution_opt: AdamState,
    pub coefficient_opt: AdamState,
    /// Generator position split as (high, low) halves of the 128-bit count.
    pub rng_pos_hi: u64,
    pub rng_pos_lo: u64,
}

impl TrainState {
    fn fresh(n_sol: usize, n_coeff: usize, cfg: &TrainConfig, pos: u128) -> TrainState {
        TrainState {
            epoch: 0,
            lambda_hint: cfg.lambda_hint,
            solution_opt: AdamState::zeros(n_sol),
            coefficient_opt: AdamState::zeros(n_coeff),
            rng_pos_hi: (pos >> 64) as u64,
            rng_pos_lo: pos as u64,
        }
    }

    pub fn rng_pos(&self) -> u128 {
        ((self.rng_pos_hi as u128) << 64) | self.rng_pos_lo as u128
    }
}

/// Per-epoch training record: unweighted term values (averaged over the
/// trajectories' steps) plus the weighted total that was optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1 = solution phase, 2 = coefficient phase.
    pub phase: u8,
    pub data: f64,
    pub ic: f64,
    pub phys: f64,
    pub hint: f64,
    pub smooth: f64,
    pub roll: f64,
    pub total: f64,
    pub lambda_hint: f64,
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    Data(String),
    Network(NnError),
    /// Non-finite value encountered; training cannot continue.
    Numeric {
        epoch: usize,
        trajectory: u32,
        detail: String,
    },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "bad training configuration: {msg}"),
            TrainError::Data(msg) => write!(f, "unusable dataset: {msg}"),
            TrainError::Network(e) => write!(f, "network construction failed: {e}"),
            TrainError::Numeric {
                epoch,
                trajectory,
                detail,
            } => write!(
                f,
                "numerical failure at epoch {epoch}, trajectory {trajectory}: {detail}"
            ),
        }
    }
}

impl Error for TrainError {}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Network(e)
    }
}

/// Result of a training run: the final model, the resumable optimizer state,
/// and one record per completed epoch of this call.
pub struct TrainOutput {
    pub model: Model,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
}

/// Graph nodes kept per collocation point in the solution-phase tape.
struct ColNodes {
    y: ExprId,
    v: ExprId,
    ydot: ExprId,
    vdot: ExprId,
    r_dyn: ExprId,
    r_kin: ExprId,
}

/// Per-trajectory training workspace: targets, persistent solution-phase
/// tape, per-block coefficient-phase tape, and the frozen reconstruction
/// cache the coefficient phase trains against.
struct TrajWork {
    id: u32,
    meas_y: Vec<f64>,
    meas_v: Vec<f64>,
    col_t: Vec<f64>,
    col_u: Vec<f64>,
    p1: Tape,
    p1_meas: Vec<(ExprId, ExprId)>,
    p1_col: Vec<ColNodes>,
    p2: Tape,
    p2_theta: Vec<[ExprId; 3]>,
    p2_res: Vec<ExprId>,
    sol_y: Vec<f64>,
    sol_v: Vec<f64>,
    sol_ydot: Vec<f64>,
    sol_vdot: Vec<f64>,
}

/// Value-level loss terms of one solution-phase step.
struct P1Terms {
    data: f64,
    ic: f64,
    phys: f64,
    pred_y: Vec<f64>,
    pred_v: Vec<f64>,
    r_dyn: Vec<f64>,
    r_kin: Vec<f64>,
}

/// Value-level loss terms of one coefficient-phase step.
struct P2Terms {
    phys: f64,
    hint: f64,
    smooth: f64,
    theta: Vec<Coefficients>,
    r_dyn: Vec<f64>,
}

fn build_workspace(model: &Model, traj: &Trajectory) -> Result<TrajWork, TrainError> {
    if traj.meas_t.is_empty() {
        return Err(TrainError::Data(format!(
            "trajectory {} has no measurement rows",
            traj.id
        )));
    }
    if traj.col_t.len() < 2 {
        return Err(TrainError::Data(format!(
            "trajectory {} needs at least two collocation rows",
            traj.id
        )));
    }
    let norm = &model.normalization;
    let ctx_seq = model.context_sequence(traj);
    let mut p1 = Tape::new();
    let swire = Wire::new(&model.weights, 0, true);
    let cwire = Wire::new(&model.weights, model.coefficient_base(), true);
    let ctx = model.solution.trace_context(&mut p1, swire, &ctx_seq);
    let mut p1_meas = Vec::with_capacity(traj.meas_t.len());
    for &t in &traj.meas_t {
        let pt = model
            .solution
            .trace_point(&mut p1, swire, &ctx.nodes, norm, t, false);
        p1_meas.push((pt.y.v, pt.v.v));
    }
    let mut p1_col = Vec::with_capacity(traj.col_t.len());
    for (i, &t) in traj.col_t.iter().enumerate() {
        let pt = model
            .solution
            .trace_point(&mut p1, swire, &ctx.nodes, norm, t, true);
        let u_node = p1.constant(traj.col_u[i]);
        let theta = model
            .coefficient
            .trace(&mut p1, cwire, norm, pt.y.v, pt.v.v, u_node);
        let ky = p1.mul(theta[0], pt.y.v);
        let dv = p1.mul(theta[1], pt.v.v);
        let gu = p1.mul(theta[2], u_node);
        let s1 = p1.add(pt.v.t, ky);
        let s2 = p1.add(s1, dv);
        let r_dyn = p1.sub(s2, gu);
        let r_kin = p1.sub(pt.y.t, pt.v.v);
        p1_col.push(ColNodes {
            y: pt.y.v,
            v: pt.v.v,
            ydot: pt.y.t,
            vdot: pt.v.t,
            r_dyn,
            r_kin,
        });
    }
    let n_col = traj.col_t.len();
    Ok(TrajWork {
        id: traj.id,
        meas_y: traj.meas_y.clone(),
        meas_v: traj.meas_v.clone(),
        col_t: traj.col_t.clone(),
        col_u: traj.col_u.clone(),
        p1,
        p1_meas,
        p1_col,
        p2: Tape::new(),
        p2_theta: Vec::new(),
        p2_res: Vec::new(),
        sol_y: vec![0.0; n_col],
        sol_v: vec![0.0; n_col],
        sol_ydot: vec![0.0; n_col],
        sol_vdot: vec![0.0; n_col],
    })
}

/// Replays the solution-phase tape at `weights` and reads back every term.
fn p1_terms(work: &mut TrajWork, model: &Model, kinematic: bool) -> Result<P1Terms, AdError> {
    work.p1.replay(&model.weights)?;
    let pred_y: Vec<f64> = work.p1_meas.iter().map(|&(y, _)| work.p1.value(y)).collect();
    let pred_v: Vec<f64> = work.p1_meas.iter().map(|&(_, v)| work.p1.value(v)).collect();
    let data = loss::data_loss(&pred_y, &pred_v, &work.meas_y, &work.meas_v);
    let ic = loss::ic_loss(
        State {
            y: pred_y[0],
            v: pred_v[0],
        },
        State {
            y: work.meas_y[0],
            v: work.meas_v[0],
        },
    );
    let r_dyn: Vec<f64> = work.p1_col.iter().map(|c| work.p1.value(c.r_dyn)).collect();
    let r_kin: Vec<f64> = work.p1_col.iter().map(|c| work.p1.value(c.r_kin)).collect();
    let n = r_dyn.len() as f64;
    let mut phys = r_dyn.iter().map(|r| r * r).sum::<f64>() / n;
    if kinematic {
        phys += r_kin.iter().map(|r| r * r).sum::<f64>() / n;
    }
    Ok(P1Terms {
        data,
        ic,
        phys,
        pred_y,
        pred_v,
        r_dyn,
        r_kin,
    })
}

/// Seed adjoints of the weighted solution-phase objective.
fn p1_seeds(
    work: &TrajWork,
    terms: &P1Terms,
    lambda_data: f64,
    lambda_ic: f64,
    lambda_phys: f64,
    kinematic: bool,
) -> Vec<(ExprId, f64)> {
    let n_m = work.meas_y.len() as f64;
    let n_c = work.p1_col.len() as f64;
    let mut seeds = Vec::with_capacity(work.p1_meas.len() * 2 + work.p1_col.len() * 2 + 2);
    for (j, &(ny, nv)) in work.p1_meas.iter().enumerate() {
        let dy = terms.pred_y[j] - work.meas_y[j];
        let dv = terms.pred_v[j] - work.meas_v[j];
        seeds.push((ny, lambda_data * dy / n_m));
        seeds.push((nv, lambda_data * dv / n_m));
    }
    // The initial condition anchors on the first measurement point.
    let dy0 = terms.pred_y[0] - work.meas_y[0];
    let dv0 = terms.pred_v[0] - work.meas_v[0];
    seeds.push((work.p1_meas[0].0, 2.0 * lambda_ic * dy0));
    seeds.push((work.p1_meas[0].1, 2.0 * lambda_ic * dv0));
    if lambda_phys > 0.0 {
        for (i, c) in work.p1_col.iter().enumerate() {
            seeds.push((c.r_dyn, 2.0 * lambda_phys * terms.r_dyn[i] / n_c));
            if kinematic {
                seeds.push((c.r_kin, 2.0 * lambda_phys * terms.r_kin[i] / n_c));
            }
        }
    }
    seeds
}

/// Freezes the solution network for a coefficient block: caches its
/// reconstruction (and derivatives) on the collocation grid, then rebuilds
/// the coefficient tape against those constants.
fn enter_coefficient_block(work: &mut TrajWork, model: &Model) -> Result<(), AdError> {
    work.p1.replay(&model.weights)?;
    for (i, c) in work.p1_col.iter().enumerate() {
        work.sol_y[i] = work.p1.value(c.y);
        work.sol_v[i] = work.p1.value(c.v);
        work.sol_ydot[i] = work.p1.value(c.ydot);
        work.sol_vdot[i] = work.p1.value(c.vdot);
    }
    work.p2.clear();
    work.p2_theta.clear();
    work.p2_res.clear();
    let cwire = Wire::new(&model.weights, model.coefficient_base(), true);
    let norm = &model.normalization;
    for i in 0..work.col_t.len() {
        let y = work.p2.constant(work.sol_y[i]);
        let v = work.p2.constant(work.sol_v[i]);
        let u = work.p2.constant(work.col_u[i]);
        let vdot = work.p2.constant(work.sol_vdot[i]);
        let theta = model.coefficient.trace(&mut work.p2, cwire, norm, y, v, u);
        let ky = work.p2.mul(theta[0], y);
        let dv = work.p2.mul(theta[1], v);
        let gu = work.p2.mul(theta[2], u);
        let s1 = work.p2.add(vdot, ky);
        let s2 = work.p2.add(s1, dv);
        let r = work.p2.sub(s2, gu);
        work.p2_theta.push(theta);
        work.p2_res.push(r);
    }
    Ok(())
}

/// Replays the coefficient-phase tape and reads back every term.
fn p2_terms(
    work: &mut TrajWork,
    model: &Model,
    hints: &[Hint],
    kinematic: bool,
) -> Result<P2Terms, AdError> {
    work.p2.replay(&model.weights)?;
    let theta: Vec<Coefficients> = work
        .p2_theta
        .iter()
        .map(|t| Coefficients {
            k: work.p2.value(t[0]),
            d: work.p2.value(t[1]),
            g: work.p2.value(t[2]),
        })
        .collect();
    let r_dyn: Vec<f64> = work.p2_res.iter().map(|&r| work.p2.value(r)).collect();
    let phys = loss::physics_loss(
        &work.sol_y,
        &work.sol_v,
        &work.sol_ydot,
        &work.sol_vdot,
        &work.col_u,
        &theta,
        kinematic,
    );
    let hint = loss::hint_loss(&theta, hints);
    let smooth = loss::smoothness_loss(&[&theta]);
    Ok(P2Terms {
        phys,
        hint,
        smooth,
        theta,
        r_dyn,
    })
}

/// Seed adjoints of the weighted coefficient-phase objective (without the
/// rollout term, which differentiates on its own tape).
fn p2_seeds(
    work: &TrajWork,
    terms: &P2Terms,
    hints: &[Hint],
    lambda_phys: f64,
    lambda_hint: f64,
    lambda_smooth: f64,
) -> Vec<(ExprId, f64)> {
    let n = work.p2_res.len() as f64;
    let mut seeds = Vec::with_capacity(work.p2_res.len() * 4);
    if lambda_phys > 0.0 {
        for (i, &r) in work.p2_res.iter().enumerate() {
            seeds.push((work.p2_res[i], 2.0 * lambda_phys * terms.r_dyn[i] / n));
            let _ = r;
        }
    }
    if lambda_hint > 0.0 {
        let den: f64 = hints.iter().map(|h| h.weight).sum();
        if den > 0.0 {
            for (i, h) in hints.iter().enumerate() {
                if h.weight == 0.0 {
                    continue;
                }
                let t = terms.theta[i];
                let scale = 2.0 * lambda_hint * h.weight / den;
                seeds.push((work.p2_theta[i][0], scale * (t.k - h.theta.k)));
                seeds.push((work.p2_theta[i][1], scale * (t.d - h.theta.d)));
                seeds.push((work.p2_theta[i][2], scale * (t.g - h.theta.g)));
            }
        }
    }
    if lambda_smooth > 0.0 && terms.theta.len() > 1 {
        let steps = (terms.theta.len() - 1) as f64;
        for i in 0..terms.theta.len() - 1 {
            let a = terms.theta[i];
            let b = terms.theta[i + 1];
            for (c, (x0, x1)) in [(0, (a.k, b.k)), (1, (a.d, b.d)), (2, (a.g, b.g))] {
                let s = (x1 - x0).signum();
                if x1 == x0 {
                    continue;
                }
                seeds.push((work.p2_theta[i + 1][c], lambda_smooth * s / steps));
                seeds.push((work.p2_theta[i][c], -lambda_smooth * s / steps));
            }
        }
    }
    seeds
}

/// Short-rollout consistency: integrates the surrogate through the
/// coefficient network from frozen anchor states and differentiates the
/// mismatch against the frozen reconstruction. Built on a scratch tape per
/// step; only used when `lambda_rollout > 0`.
fn rollout_backward(
    work: &TrajWork,
    model: &Model,
    anchors: usize,
    horizon: usize,
    lambda_rollout: f64,
    grads: &mut GradientMap,
) -> Result<f64, AdError> {
    let n = work.col_t.len();
    if n < horizon + 2 {
        return Ok(0.0);
    }
    let max_start = n - 1 - horizon;
    let count = anchors.min(max_start + 1).max(1);
    let mut starts: Vec<usize> = (0..count)
        .map(|i| {
            if count == 1 {
                0
            } else {
                (i * max_start + (count - 1) / 2) / (count - 1)
            }
        })
        .collect();
    starts.dedup();

    let mut tape = Tape::new();
    let cwire = Wire::new(&model.weights, model.coefficient_base(), true);
    let norm = &model.normalization;
    let mut preds: Vec<(ExprId, ExprId)> = Vec::with_capacity(starts.len() * horizon);
    let mut targets: Vec<(f64, f64)> = Vec::with_capacity(starts.len() * horizon);
    for &a in &starts {
        let mut xy = tape.constant(work.sol_y[a]);
        let mut xv = tape.constant(work.sol_v[a]);
        for s in 0..horizon {
            let t0 = work.col_t[a + s];
            let h = work.col_t[a + s + 1] - t0;
            let hc = tape.constant(h);
            // Classical RK4 through the coefficient network.
            let stage = |tape: &mut Tape, y: ExprId, v: ExprId, tq: f64| {
                let u = tape.constant(lerp_series(&work.col_t, &work.col_u, tq));
                let th = model.coefficient.trace(tape, cwire, norm, y, v, u);
                let ky = tape.mul(th[0], y);
                let dv = tape.mul(th[1], v);
                let gu = tape.mul(th[2], u);
                let s1 = tape.add(ky, dv);
                let s2 = tape.sub(gu, s1);
                (v, s2) // (dy/dt, dv/dt)
            };
            let (k1y, k1v) = stage(&mut tape, xy, xv, t0);
            let half = tape.constant(0.5);
            let hh = tape.mul(hc, half);
            let y2 = mul_add(&mut tape, hh, k1y, xy);
            let v2 = mul_add(&mut tape, hh, k1v, xv);
            let (k2y, k2v) = stage(&mut tape, y2, v2, t0 + 0.5 * h);
            let y3 = mul_add(&mut tape, hh, k2y, xy);
            let v3 = mul_add(&mut tape, hh, k2v, xv);
            let (k3y, k3v) = stage(&mut tape, y3, v3, t0 + 0.5 * h);
            let y4 = mul_add(&mut tape, hc, k3y, xy);
            let v4 = mul_add(&mut tape, hc, k3v, xv);
            let (k4y, k4v) = stage(&mut tape, y4, v4, t0 + h);
            let sixth = tape.constant(h / 6.0);
            let two = tape.constant(2.0);
            xy = rk4_combine(&mut tape, xy, sixth, two, k1y, k2y, k3y, k4y);
            xv = rk4_combine(&mut tape, xv, sixth, two, k1v, k2v, k3v, k4v);
            preds.push((xy, xv));
            targets.push((work.sol_y[a + s + 1], work.sol_v[a + s + 1]));
        }
    }
    let m = preds.len() as f64;
    let mut value = 0.0;
    let mut seeds = Vec::with_capacity(preds.len() * 2);
    for (&(py, pv), &(ty, tv)) in preds.iter().zip(&targets) {
        let dy = tape.value(py) - ty;
        let dv = tape.value(pv) - tv;
        value += dy * dy + dv * dv;
        seeds.push((py, 2.0 * lambda_rollout * dy / m));
        seeds.push((pv, 2.0 * lambda_rollout * dv / m));
    }
    tape.backward_seeded(&seeds, grads)?;
    Ok(value / m)
}

fn mul_add(tape: &mut Tape, a: ExprId, b: ExprId, c: ExprId) -> ExprId {
    let p = tape.mul(a, b);
    tape.add(p, c)
}

fn rk4_combine(
    tape: &mut Tape,
    x: ExprId,
    sixth: ExprId,
    two: ExprId,
    k1: ExprId,
    k2: ExprId,
    k3: ExprId,
    k4: ExprId,
) -> ExprId {
    let k2_2 = tape.mul(k2, two);
    let k3_2 = tape.mul(k3, two);
    let s1 = tape.add(k1, k2_2);
    let s2 = tape.add(s1, k3_2);
    let s3 = tape.add(s2, k4);
    let inc = tape.mul(sixth, s3);
    tape.add(x, inc)
}

/// Trains a fresh model on the dataset's training split.
pub fn train(dataset: &Dataset, config: &ExperimentConfig) -> Result<TrainOutput, TrainError> {
    train_from(dataset, config, None)
}

/// Trains, optionally continuing from a checkpointed model and state. The
/// continued run is bit-identical to one that never stopped.
pub fn train_from(
    dataset: &Dataset,
    config: &ExperimentConfig,
    resume: Option<(Model, TrainState)>,
) -> Result<TrainOutput, TrainError> {
    train_observed(dataset, config, resume, &mut |_, _, _| {})
}

/// Like [`train_from`], but invokes `observer` after every completed epoch
/// with the current model, the up-to-date training state, and that epoch's
/// loss record — the hook callers use for periodic checkpointing.
pub fn train_observed(
    dataset: &Dataset,
    config: &ExperimentConfig,
    resume: Option<(Model, TrainState)>,
    observer: &mut dyn FnMut(&Model, &TrainState, &EpochRecord),
) -> Result<TrainOutput, TrainError> {
    config
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let cfg = &config.train;
    let trajs: Vec<&Trajectory> = dataset.train().collect();
    if trajs.is_empty() {
        return Err(TrainError::Data("dataset has no training split".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut model, mut state) = match resume {
        Some((m, s)) => (m, s),
        None => {
            let model = Model::init(config, dataset.normalization.clone(), &mut rng)?;
            let n_sol = model.solution.param_count();
            let n_coeff = model.coefficient.param_count();
            let state = TrainState::fresh(n_sol, n_coeff, cfg, rng.get_word_pos());
            (model, state)
        }
    };
    rng.set_word_pos(state.rng_pos());
    if state.solution_opt.m.len() != model.solution.param_count()
        || state.coefficient_opt.m.len() != model.coefficient.param_count()
    {
        return Err(TrainError::Config(
            "optimizer state does not match the model architecture".into(),
        ));
    }

    let mut works: Vec<TrajWork> = trajs
        .iter()
        .map(|t| build_workspace(&model, t))
        .collect::<Result<_, _>>()?;

    let coeff_base = model.coefficient_base();
    let total = model.param_count();
    let mut adam_sol = Adam::new(0, coeff_base, cfg.lr_solution, state.solution_opt.clone());
    let mut adam_coeff = Adam::new(
        coeff_base,
        total,
        cfg.lr_coefficient,
        state.coefficient_opt.clone(),
    );
    let mut grads = GradientMap::zeros(total);
    let mut history = Vec::with_capacity(cfg.epochs.saturating_sub(state.epoch));
    // Coefficient blocks freeze the solution network; the frozen caches must
    // be (re)built on the first coefficient epoch after any solution update
    // or resume.
    let mut block_stale = true;
    let warmup = cfg.physics_warmup.unwrap_or(cfg.phase1_epochs / 2);
    let mut order: Vec<usize> = (0..works.len()).collect();

    for epoch in state.epoch..cfg.epochs {
        let phase = phase_of(epoch, cfg.phase1_epochs, cfg.phase2_epochs);
        // Visit trajectories in a fresh random order each epoch. The
        // permutation must be a function of the rng position alone (not of
        // previous epochs' orders) so resumed runs replay it exactly.
        for (i, o) in order.iter_mut().enumerate() {
            *o = i;
        }
        order.shuffle(&mut rng);
        let mut record = EpochRecord {
            epoch,
            phase: if phase == Phase::Solution { 1 } else { 2 },
            ..EpochRecord::default()
        };
        match phase {
            Phase::Solution => {
                block_stale = true;
                let lambda_phys = if epoch < warmup {
                    0.0
                } else {
                    cfg.lambda_phys
                };
                for &wi in &order {
                    let work = &mut works[wi];
                    let terms = p1_terms(work, &model, cfg.kinematic_residual)
                        .map_err(|e| numeric(epoch, work.id, &work.p1, e))?;
                    let total_j = cfg.lambda_data * terms.data
                        + cfg.lambda_ic * terms.ic
                        + lambda_phys * terms.phys;
                    if !total_j.is_finite() {
                        return Err(TrainError::Numeric {
                            epoch,
                            trajectory: work.id,
                            detail: format!(
                                "solution objective is not finite \
                                 (data {:.3e}, ic {:.3e}, phys {:.3e})",
                                terms.data, terms.ic, terms.phys
                            ),
                        });
                    }
                    let seeds = p1_seeds(
                        work,
                        &terms,
                        cfg.lambda_data,
                        cfg.lambda_ic,
                        lambda_phys,
                        cfg.kinematic_residual,
                    );
                    grads.reset();
                    work.p1
                        .backward_seeded(&seeds, &mut grads)
                        .map_err(|e| numeric(epoch, work.id, &work.p1, e))?;
                    adam_sol.step(&mut model.weights, grads.as_slice());
                    record.data += terms.data;
                    record.ic += terms.ic;
                    record.phys += terms.phys;
                    record.total += total_j;
                }
            }
            Phase::Coefficient => {
                // The hint weight decays once per coefficient epoch.
                state.lambda_hint *= cfg.hint_decay;
                if block_stale {
                    for work in works.iter_mut() {
                        enter_coefficient_block(work, &model)
                            .map_err(|e| numeric(epoch, work.id, &work.p1, e))?;
                    }
                    block_stale = false;
                }
                for &wi in &order {
                    let work = &mut works[wi];
                    let window = sample_window_length(&mut rng, work.col_t.len());
                    let hints = match window {
                        Some(w) => compute_hints(
                            &work.sol_y,
                            &work.sol_v,
                            &work.sol_vdot,
                            &work.col_u,
                            w,
                            cfg.ridge_lambda,
                        ),
                        None => Vec::new(),
                    };
                    let hints_for_loss: Vec<Hint> = if hints.is_empty() {
                        work.sol_y
                            .iter()
                            .enumerate()
                            .map(|(i, _)| Hint {
                                center: i,
                                theta: Coefficients::default(),
                                weight: 0.0,
                            })
                            .collect()
                    } else {
                        hints
                    };
                    let terms = p2_terms(work, &model, &hints_for_loss, cfg.kinematic_residual)
                        .map_err(|e| numeric(epoch, work.id, &work.p2, e))?;
                    let mut total_j = cfg.lambda_phys_coeff * terms.phys
                        + state.lambda_hint * terms.hint
                        + cfg.lambda_smooth * terms.smooth;
                    let seeds = p2_seeds(
                        work,
                        &terms,
                        &hints_for_loss,
                        cfg.lambda_phys_coeff,
                        state.lambda_hint,
                        cfg.lambda_smooth,
                    );
                    grads.reset();
                    work.p2
                        .backward_seeded(&seeds, &mut grads)
                        .map_err(|e| numeric(epoch, work.id, &work.p2, e))?;
                    let mut roll = 0.0;
                    if cfg.lambda_rollout > 0.0 {
                        roll = rollout_backward(
                            work,
                            &model,
                            cfg.rollout_anchors,
                            cfg.rollout_horizon,
                            cfg.lambda_rollout,
                            &mut grads,
                        )
                        .map_err(|e| numeric(epoch, work.id, &work.p2, e))?;
                        total_j += cfg.lambda_rollout * roll;
                    }
                    if !total_j.is_finite() {
                        return Err(TrainError::Numeric {
                            epoch,
                            trajectory: work.id,
                            detail: format!(
                                "coefficient objective is not finite \
                                 (phys {:.3e}, hint {:.3e}, smooth {:.3e}, roll {:.3e})",
                                terms.phys, terms.hint, terms.smooth, roll
                            ),
                        });
                    }
                    adam_coeff.step(&mut model.weights, grads.as_slice());
                    record.phys += terms.phys;
                    record.hint += terms.hint;
                    record.smooth += terms.smooth;
                    record.roll += roll;
                    record.total += total_j;
                }
            }
        }
        let nj = works.len() as f64;
        record.data /= nj;
        record.ic /= nj;
        record.phys /= nj;
        record.hint /= nj;
        record.smooth /= nj;
        record.roll /= nj;
        record.total /= nj;
        record.lambda_hint = state.lambda_hint;
        // Keep the externally visible state current so the observer can
        // checkpoint a resumable snapshot after any epoch.
        state.epoch = epoch + 1;
        let pos = rng.get_word_pos();
        state.rng_pos_hi = (pos >> 64) as u64;
        state.rng_pos_lo = pos as u64;
        state.solution_opt.clone_from(&adam_sol.state);
        state.coefficient_opt.clone_from(&adam_coeff.state);
        history.push(record);
        observer(&model, &state, history.last().expect("just pushed"));
    }

    state.epoch = state.epoch.max(cfg.epochs);
    let pos = rng.get_word_pos();
    state.rng_pos_hi = (pos >> 64) as u64;
    state.rng_pos_lo = pos as u64;
    state.solution_opt = adam_sol.state;
    state.coefficient_opt = adam_coeff.state;
    Ok(TrainOutput {
        model,
        state,
        history,
    })
}

/// Wraps a tape error with trajectory context and, for non-finite values,
/// the op name of the first offending node.
fn numeric(epoch: usize, trajectory: u32, tape: &Tape, e: AdError) -> TrainError {
    let detail = match &e {
        AdError::NonFinite { node, op } => match tape.find_nonfinite() {
            Some((first, name)) => format!(
                "non-finite value at node {node} ({op}); first bad node {} ({name})",
                first.index()
            ),
            None => format!("non-finite value at node {node} ({op})"),
        },
        other => other.to_string(),
    };
    TrainError::Numeric {
        epoch,
        trajectory,
        detail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::systems::{generate_dataset, GenerateConfig, InputSpec, SystemSpec};

    fn tiny_dataset(system: SystemSpec, train: usize, seed: u64) -> Dataset {
        let mut cfg = GenerateConfig::for_system(system);
        cfg.train_trajectories = train;
        cfg.test_trajectories = 1;
        cfg.t_end = 2.0;
        cfg.measurements = 5;
        cfg.collocation = 20;
        cfg.noise_sigma = 0.01;
        cfg.truth_dt = 0.002;
        cfg.input = InputSpec::default_multisine();
        generate_dataset(&cfg, seed).unwrap()
    }

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::tiny();
        cfg.train.epochs = 9;
        cfg.train.phase1_epochs = 3;
        cfg.train.phase2_epochs = 2;
        cfg.train.physics_warmup = Some(1);
        cfg.train.seed = 11;
        cfg
    }

    #[test]
    fn adam_first_step_has_unit_scale() {
        // Adam's first bias-corrected update equals lr * g/(|g| + eps'):
        // nearly -lr regardless of gradient magnitude.
        let mut weights = vec![0.0, 0.0];
        let grads = vec![1e-4, -3e2];
        let mut adam = Adam::new(0, 2, 0.01, AdamState::zeros(2));
        adam.step(&mut weights, &grads);
        assert!((weights[0] + 0.01).abs() < 1e-5, "{}", weights[0]);
        assert!((weights[1] - 0.01).abs() < 1e-5, "{}", weights[1]);
    }

    #[test]
    fn adam_matches_hand_rolled_reference() {
        // Two steps on a 1-parameter problem, cross-checked step by step.
        let mut w = vec![1.0];
        let mut adam = Adam::new(0, 1, 0.1, AdamState::zeros(1));
        let g1 = 2.0;
        adam.step(&mut w, &[g1]);
        let m1 = 0.1 * g1;
        let v1 = 0.001 * g1 * g1;
        let w1 = 1.0 - 0.1 * (m1 / 0.1) / ((v1 / 0.001).sqrt() + ADAM_EPS);
        assert!((w[0] - w1).abs() < 1e-12);
        let g2 = -1.0;
        adam.step(&mut w, &[g2]);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let bc1 = 1.0 - 0.9f64.powi(2);
        let bc2 = 1.0 - 0.999f64.powi(2);
        let w2 = w1 - 0.1 * (m2 / bc1) / ((v2 / bc2).sqrt() + ADAM_EPS);
        assert!((w[0] - w2).abs() < 1e-12);
    }

    #[test]
    fn phase_schedule_cycles() {
        let phases: Vec<Phase> = (0..10).map(|e| phase_of(e, 3, 2)).collect();
        use Phase::*;
        assert_eq!(
            phases,
            vec![
                Solution,
                Solution,
                Solution,
                Coefficient,
                Coefficient,
                Solution,
                Solution,
                Solution,
                Coefficient,
                Coefficient
            ]
        );
    }

    #[test]
    fn solution_phase_gradient_matches_finite_differences() {
        let dataset = tiny_dataset(SystemSpec::linear(2.0, 0.4, 1.0), 1, 3);
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = Model::init(&config, dataset.normalization.clone(), &mut rng).unwrap();
        let traj = dataset.train().next().unwrap();
        let mut work = build_workspace(&model, traj).unwrap();

        let (ld, lic, lp) = (1.0, 0.7, 0.3);
        let objective = |work: &mut TrajWork, model: &Model| -> f64 {
            let t = p1_terms(work, model, true).unwrap();
            ld * t.data + lic * t.ic + lp * t.phys
        };

        let terms = p1_terms(&mut work, &model, true).unwrap();
        let seeds = p1_seeds(&work, &terms, ld, lic, lp, true);
        let mut grads = GradientMap::zeros(model.param_count());
        work.p1.backward_seeded(&seeds, &mut grads).unwrap();

        let h = 1e-6;
        let mut checked = 0;
        for i in (0..model.param_count()).step_by(13) {
            let keep = model.weights[i];
            model.weights[i] = keep + h;
            let up = objective(&mut work, &model);
            model.weights[i] = keep - h;
            let dn = objective(&mut work, &model);
            model.weights[i] = keep;
            let fd = (up - dn) / (2.0 * h);
            let ad = grads.get(i);
            let tol = 1e-6 + 1e-4 * fd.abs().max(ad.abs());
            assert!(
                (fd - ad).abs() < tol,
                "param {i}: fd {fd:.9e} vs ad {ad:.9e}"
            );
            checked += 1;
        }
        assert!(checked > 20, "only {checked} spot checks");
    }

    #[test]
    fn coefficient_phase_gradient_matches_finite_differences() {
        let dataset = tiny_dataset(SystemSpec::duffing(), 1, 5);
        let mut config = tiny_config();
        config.coefficient.moe = Some(crate::nn::MoeSpec { experts: 2 });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = Model::init(&config, dataset.normalization.clone(), &mut rng).unwrap();
        let traj = dataset.train().next().unwrap();
        let mut work = build_workspace(&model, traj).unwrap();
        enter_coefficient_block(&mut work, &model).unwrap();
        let hints = compute_hints(
            &work.sol_y,
            &work.sol_v,
            &work.sol_vdot,
            &work.col_u,
            7,
            1e-6,
        );

        let (lp, lh, ls) = (0.4, 0.8, 0.05);
        let objective = |work: &mut TrajWork, model: &Model, hints: &[Hint]| -> f64 {
            let t = p2_terms(work, model, hints, true).unwrap();
            lp * t.phys + lh * t.hint + ls * t.smooth
        };

        let terms = p2_terms(&mut work, &model, &hints, true).unwrap();
        let seeds = p2_seeds(&work, &terms, &hints, lp, lh, ls);
        let mut grads = GradientMap::zeros(model.param_count());
        work.p2.backward_seeded(&seeds, &mut grads).unwrap();

        let h = 1e-6;
        let base = model.coefficient_base();
        let mut checked = 0;
        for i in (base..model.param_count()).step_by(7) {
            let keep = model.weights[i];
            model.weights[i] = keep + h;
            let up = objective(&mut work, &model, &hints);
            model.weights[i] = keep - h;
            let dn = objective(&mut work, &model, &hints);
            model.weights[i] = keep;
            let fd = (up - dn) / (2.0 * h);
            let ad = grads.get(i);
            // The total-variation term is piecewise linear; skip indices
            // where the perturbation flips a difference's sign.
            let tol = 1e-6 + 1e-4 * fd.abs().max(ad.abs());
            if (fd - ad).abs() >= tol {
                let t0 = p2_terms(&mut work, &model, &hints, true).unwrap();
                let flipped = t0.theta.windows(2).any(|w| {
                    (w[1].k - w[0].k).abs() < 10.0 * h
                        || (w[1].d - w[0].d).abs() < 10.0 * h
                        || (w[1].g - w[0].g).abs() < 10.0 * h
                });
                assert!(flipped, "param {i}: fd {fd:.9e} vs ad {ad:.9e}");
            }
            checked += 1;
        }
        assert!(checked > 20, "only {checked} spot checks");
    }

    #[test]
    fn rollout_gradient_matches_finite_differences() {
        let dataset = tiny_dataset(SystemSpec::linear(1.5, 0.5, 1.0), 1, 13);
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = Model::init(&config, dataset.normalization.clone(), &mut rng).unwrap();
        let traj = dataset.train().next().unwrap();
        let mut work = build_workspace(&model, traj).unwrap();
        enter_coefficient_block(&mut work, &model).unwrap();

        let lr = 0.6;
        let mut grads = GradientMap::zeros(model.param_count());
        let value = rollout_backward(&work, &model, 3, 2, lr, &mut grads).unwrap();
        assert!(value >= 0.0);

        let h = 1e-6;
        let base = model.coefficient_base();
        let mut checked = 0;
        for i in (base..model.param_count()).step_by(11) {
            let keep = model.weights[i];
            let mut scratch = GradientMap::zeros(model.param_count());
            model.weights[i] = keep + h;
            let up = rollout_backward(&work, &model, 3, 2, lr, &mut scratch).unwrap();
            model.weights[i] = keep - h;
            let dn = rollout_backward(&work, &model, 3, 2, lr, &mut scratch).unwrap();
            model.weights[i] = keep;
            let fd = lr * (up - dn) / (2.0 * h);
            let ad = grads.get(i);
            let tol = 1e-6 + 1e-4 * fd.abs().max(ad.abs());
            assert!(
                (fd - ad).abs() < tol,
                "param {i}: fd {fd:.9e} vs ad {ad:.9e}"
            );
            checked += 1;
        }
        assert!(checked > 5, "only {checked} spot checks");
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let dataset = tiny_dataset(SystemSpec::linear(2.0, 0.4, 1.0), 2, 17);
        let config = tiny_config();
        let a = train(&dataset, &config).unwrap();
        let b = train(&dataset, &config).unwrap();
        assert_eq!(a.model.weights, b.model.weights);
        assert_eq!(a.history.len(), config.train.epochs);
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra, rb);
        }
        // Phases follow the schedule and every term is finite.
        for r in &a.history {
            let want = match phase_of(r.epoch, 3, 2) {
                Phase::Solution => 1,
                Phase::Coefficient => 2,
            };
            assert_eq!(r.phase, want);
            assert!(r.total.is_finite());
        }
    }

    #[test]
    fn training_reduces_the_data_loss() {
        let dataset = tiny_dataset(SystemSpec::linear(2.0, 0.4, 1.0), 2, 29);
        let mut config = tiny_config();
        config.train.epochs = 150;
        config.train.phase1_epochs = 8;
        config.train.phase2_epochs = 4;
        config.train.physics_warmup = Some(4);
        let out = train(&dataset, &config).unwrap();
        let first = out.history.iter().find(|r| r.phase == 1).unwrap();
        let last = out
            .history
            .iter()
            .rev()
            .find(|r| r.phase == 1)
            .unwrap();
        assert!(
            last.data < 0.5 * first.data,
            "data loss did not improve: {} -> {}",
            first.data,
            last.data
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dataset = tiny_dataset(SystemSpec::duffing(), 2, 23);
        let config = tiny_config();

        let full = train(&dataset, &config).unwrap();

        let mut short_cfg = config.clone();
        short_cfg.train.epochs = 5; // stops inside a coefficient block
        let part = train(&dataset, &short_cfg).unwrap();
        let resumed = train_from(&dataset, &config, Some((part.model, part.state))).unwrap();

        assert_eq!(full.model.weights, resumed.model.weights);
        assert_eq!(full.state, resumed.state);
        let rows: Vec<&EpochRecord> = part.history.iter().chain(&resumed.history).collect();
        assert_eq!(rows.len(), full.history.len());
        for (a, b) in rows.iter().zip(&full.history) {
            assert_eq!(**a, *b);
        }
    }

    #[test]
    fn hint_weight_decays_geometrically_per_coefficient_epoch() {
        let dataset = tiny_dataset(SystemSpec::linear(1.0, 0.2, 1.0), 1, 31);
        let mut config = tiny_config();
        config.train.hint_decay = 0.5;
        config.train.epochs = 10;
        let out = train(&dataset, &config).unwrap();
        let mut expected = config.train.lambda_hint;
        for r in &out.history {
            if r.phase == 2 {
                expected *= 0.5;
            }
            assert_eq!(r.lambda_hint, expected);
        }
    }

    #[test]
    fn divergent_settings_fail_with_a_numeric_error() {
        let dataset = tiny_dataset(SystemSpec::linear(2.0, 0.4, 1.0), 1, 37);
        let mut config = tiny_config();
        config.train.lr_solution = 1e150;
        config.train.epochs = 6;
        match train(&dataset, &config) {
            Err(TrainError::Numeric { .. }) => {}
            Err(other) => panic!("expected numeric failure, got {other}"),
            Ok(_) => panic!("expected numeric failure, training succeeded"),
        }
    }

    #[test]
    fn rollout_term_trains_when_enabled() {
        let dataset = tiny_dataset(SystemSpec::linear(1.0, 0.3, 1.0), 1, 41);
        let mut config = tiny_config();
        config.train.lambda_rollout = 0.1;
        config.train.rollout_anchors = 3;
        config.train.rollout_horizon = 2;
        let out = train(&dataset, &config).unwrap();
        let p2_rows: Vec<_> = out.history.iter().filter(|r| r.phase == 2).collect();
        assert!(!p2_rows.is_empty());
        assert!(p2_rows.iter().all(|r| r.roll.is_finite()));
        assert!(p2_rows.iter().any(|r| r.roll > 0.0));
    }
}
