//! Constant-coefficient inverse-PINN baselines.
//!
//! Both baselines treat (k, d, g) as three trainable scalars instead of a
//! state-conditioned network, and minimize `lambda_data * L_data +
//! lambda_phys * L_phys` jointly over solution-network weights and those
//! scalars — single phase, no curriculum, no regression hints, no
//! initial-condition term.
//!
//! * The single-trajectory variant trains one independent solution network
//!   (unconditioned: no input-sequence encoder) plus its own scalar triple
//!   per training trajectory.
//! * The multi-trajectory variant trains one solution network with exactly
//!   the same conditioning machinery as the full method, sharing a single
//!   scalar triple across all training trajectories.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    context_sequence, numeric, Adam, AdamState, EpochRecord, TrainError,
};
use crate::autodiff::{ExprId, GradientMap, Tape};
use crate::config::ExperimentConfig;
use crate::loss;
use crate::nn::{SolutionNet, SolutionNetSpec, Wire};
use crate::surrogate::{Coefficients, Normalization, State};
use crate::systems::{Dataset, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Independent model per training trajectory.
    Ipinn,
    /// One conditioned model across trajectories, scalars shared.
    IpinnM,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Ipinn => "ipinn",
            BaselineKind::IpinnM => "ipinn-m",
        }
    }
}

/// One trained submodel: flat weights laid out `[network | k d g]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineSub {
    /// Training trajectory this submodel was fit to; the shared variant
    /// lists every training id.
    pub trained_on: Vec<u32>,
    pub weights: Vec<f64>,
}

/// A trained baseline: the architecture, its submodels, and the scalar
/// coefficient triples they learned.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub solution: SolutionNet,
    pub normalization: Normalization,
    pub subs: Vec<BaselineSub>,
}

impl BaselineModel {
    /// Scalar triple of one submodel.
    pub fn theta_of(&self, sub: usize) -> Coefficients {
        let w = &self.subs[sub].weights;
        let b = self.solution.param_count();
        Coefficients {
            k: w[b],
            d: w[b + 1],
            g: w[b + 2],
        }
    }

    /// The constant coefficient estimate the baseline reports: the mean over
    /// submodels (a single submodel returns its own triple).
    pub fn mean_theta(&self) -> Coefficients {
        let n = self.subs.len() as f64;
        let mut acc = Coefficients::default();
        for i in 0..self.subs.len() {
            let t = self.theta_of(i);
            acc.k += t.k;
            acc.d += t.d;
            acc.g += t.g;
        }
        Coefficients {
            k: acc.k / n,
            d: acc.d / n,
            g: acc.g / n,
        }
    }

    /// Conditioning values of a submodel for a trajectory (empty for the
    /// unconditioned single-trajectory variant).
    pub fn context_for(&self, sub: usize, traj: &Trajectory) -> crate::nn::FilmValues {
        let seq = context_sequence(
            &self.normalization,
            traj,
            self.solution.spec.context_len,
        );
        self.solution
            .context_values(&self.subs[sub].weights, 0, &seq)
    }

    /// Reconstruction by one submodel at time `t`.
    pub fn reconstruct(&self, sub: usize, film: &crate::nn::FilmValues, t: f64) -> State {
        self.solution
            .reconstruct(&self.subs[sub].weights, 0, film, &self.normalization, t)
    }
}

pub struct BaselineOutput {
    pub model: BaselineModel,
    pub history: Vec<EpochRecord>,
}

/// Graph handles of one trajectory under one submodel.
struct BaseWork {
    id: u32,
    meas_y: Vec<f64>,
    meas_v: Vec<f64>,
    tape: Tape,
    meas_nodes: Vec<(ExprId, ExprId)>,
    r_dyn: Vec<ExprId>,
    r_kin: Vec<ExprId>,
}

fn build_base_work(
    solution: &SolutionNet,
    weights: &[f64],
    norm: &Normalization,
    traj: &Trajectory,
) -> Result<BaseWork, TrainError> {
    if traj.meas_t.is_empty() || traj.col_t.len() < 2 {
        return Err(TrainError::Data(format!(
            "trajectory {} lacks measurement or collocation rows",
            traj.id
        )));
    }
    let theta_base = solution.param_count();
    let ctx_seq = context_sequence(norm, traj, solution.spec.context_len);
    let mut tape = Tape::new();
    let wire = Wire::new(weights, 0, true);
    let ctx = solution.trace_context(&mut tape, wire, &ctx_seq);
    let mut meas_nodes = Vec::with_capacity(traj.meas_t.len());
    for &t in &traj.meas_t {
        let pt = solution.trace_point(&mut tape, wire, &ctx.nodes, norm, t, false);
        meas_nodes.push((pt.y.v, pt.v.v));
    }
    let k = wire.node(&mut tape, theta_base);
    let d = wire.node(&mut tape, theta_base + 1);
    let g = wire.node(&mut tape, theta_base + 2);
    let mut r_dyn = Vec::with_capacity(traj.col_t.len());
    let mut r_kin = Vec::with_capacity(traj.col_t.len());
    for (i, &t) in traj.col_t.iter().enumerate() {
        let pt = solution.trace_point(&mut tape, wire, &ctx.nodes, norm, t, true);
        let u_node = tape.constant(traj.col_u[i]);
        let ky = tape.mul(k, pt.y.v);
        let dv = tape.mul(d, pt.v.v);
        let gu = tape.mul(g, u_node);
        let s1 = tape.add(pt.v.t, ky);
        let s2 = tape.add(s1, dv);
        r_dyn.push(tape.sub(s2, gu));
        r_kin.push(tape.sub(pt.y.t, pt.v.v));
    }
    Ok(BaseWork {
        id: traj.id,
        meas_y: traj.meas_y.clone(),
        meas_v: traj.meas_v.clone(),
        tape,
        meas_nodes,
        r_dyn,
        r_kin,
    })
}

/// One Adam step of a submodel on one of its trajectories; returns
/// (data, phys, weighted total).
fn base_step(
    work: &mut BaseWork,
    weights: &mut Vec<f64>,
    adam: &mut Adam,
    grads: &mut GradientMap,
    lambda_data: f64,
    lambda_phys: f64,
    kinematic: bool,
    epoch: usize,
) -> Result<(f64, f64, f64), TrainError> {
    work.tape
        .replay(weights)
        .map_err(|e| numeric(epoch, work.id, &work.tape, e))?;
    let pred_y: Vec<f64> = work
        .meas_nodes
        .iter()
        .map(|&(y, _)| work.tape.value(y))
        .collect();
    let pred_v: Vec<f64> = work
        .meas_nodes
        .iter()
        .map(|&(_, v)| work.tape.value(v))
        .collect();
    let data = loss::data_loss(&pred_y, &pred_v, &work.meas_y, &work.meas_v);
    let rd: Vec<f64> = work.r_dyn.iter().map(|&r| work.tape.value(r)).collect();
    let rk: Vec<f64> = work.r_kin.iter().map(|&r| work.tape.value(r)).collect();
    let n = rd.len() as f64;
    let mut phys = rd.iter().map(|r| r * r).sum::<f64>() / n;
    if kinematic {
        phys += rk.iter().map(|r| r * r).sum::<f64>() / n;
    }
    let total = lambda_data * data + lambda_phys * phys;
    if !total.is_finite() {
        return Err(TrainError::Numeric {
            epoch,
            trajectory: work.id,
            detail: format!("baseline objective is not finite (data {data:.3e}, phys {phys:.3e})"),
        });
    }
    let n_m = work.meas_y.len() as f64;
    let mut seeds = Vec::with_capacity(work.meas_nodes.len() * 2 + work.r_dyn.len() * 2);
    for (j, &(ny, nv)) in work.meas_nodes.iter().enumerate() {
        seeds.push((ny, lambda_data * (pred_y[j] - work.meas_y[j]) / n_m));
        seeds.push((nv, lambda_data * (pred_v[j] - work.meas_v[j]) / n_m));
    }
    if lambda_phys > 0.0 {
        for i in 0..work.r_dyn.len() {
            seeds.push((work.r_dyn[i], 2.0 * lambda_phys * rd[i] / n));
            if kinematic {
                seeds.push((work.r_kin[i], 2.0 * lambda_phys * rk[i] / n));
            }
        }
    }
    grads.reset();
    work.tape
        .backward_seeded(&seeds, grads)
        .map_err(|e| numeric(epoch, work.id, &work.tape, e))?;
    adam.step(weights, grads.as_slice());
    Ok((data, phys, total))
}

/// Trains a baseline on the dataset's training split. The configuration's
/// solution-network architecture, loss weights, learning rate, epoch budget,
/// and seed all carry over so comparisons stay controlled.
pub fn train_baseline(
    dataset: &Dataset,
    config: &ExperimentConfig,
    kind: BaselineKind,
) -> Result<BaselineOutput, TrainError> {
    config
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let cfg = &config.train;
    let trajs: Vec<&Trajectory> = dataset.train().collect();
    if trajs.is_empty() {
        return Err(TrainError::Data("dataset has no training split".into()));
    }
    let norm = dataset.normalization.clone();
    let spec = match kind {
        BaselineKind::Ipinn => SolutionNetSpec {
            // No cross-trajectory conditioning: every trajectory gets its
            // own network, so the encoder would only see one sequence.
            gru_hidden: 0,
            ..config.solution.clone()
        },
        BaselineKind::IpinnM => config.solution.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let solution = SolutionNet::fresh(spec, &mut rng)?;
    let net_n = solution.param_count();
    let total_n = net_n + 3;

    // Submodels: one per trajectory, or one shared.
    let groups: Vec<Vec<&Trajectory>> = match kind {
        BaselineKind::Ipinn => trajs.iter().map(|t| vec![*t]).collect(),
        BaselineKind::IpinnM => vec![trajs.clone()],
    };
    let mut subs: Vec<(Vec<f64>, Vec<BaseWork>, Adam)> = Vec::with_capacity(groups.len());
    for group in &groups {
        let mut weights = vec![0.0; total_n];
        solution.init_weights(&mut weights[..net_n], &mut rng);
        // The scalar triple starts at zero: no prior on the dynamics.
        let works: Vec<BaseWork> = group
            .iter()
            .map(|t| build_base_work(&solution, &weights, &norm, t))
            .collect::<Result<_, _>>()?;
        let adam = Adam::new(0, total_n, cfg.lr_solution, AdamState::zeros(total_n));
        subs.push((weights, works, adam));
    }

    let mut grads = GradientMap::zeros(total_n);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut record = EpochRecord {
            epoch,
            phase: 1,
            ..EpochRecord::default()
        };
        let mut steps = 0usize;
        for (weights, works, adam) in subs.iter_mut() {
            let mut order: Vec<usize> = (0..works.len()).collect();
            order.shuffle(&mut rng);
            for &wi in &order {
                let work = &mut works[wi];
                let (data, phys, total) = base_step(
                    work,
                    weights,
                    adam,
                    &mut grads,
                    cfg.lambda_data,
                    cfg.lambda_phys,
                    cfg.kinematic_residual,
                    epoch,
                )?;
                record.data += data;
                record.phys += phys;
                record.total += total;
                steps += 1;
            }
        }
        let s = steps as f64;
        record.data /= s;
        record.phys /= s;
        record.total /= s;
        history.push(record);
    }

    let model = BaselineModel {
        kind,
        solution,
        normalization: norm,
        subs: groups
            .iter()
            .zip(subs)
            .map(|(group, (weights, _, _))| BaselineSub {
                trained_on: group.iter().map(|t| t.id).collect(),
                weights,
            })
            .collect(),
    };
    Ok(BaselineOutput { model, history })
}
