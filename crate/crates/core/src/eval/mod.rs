//! Evaluation protocols: solution-reconstruction accuracy, phase-portrait
//! cosine similarity against the true vector field, and open-loop rollout
//! scoring on held-out trajectories. All metrics work through small closures
//! over "plane fields" `(y, v, u) -> (dy/dt, dv/dt)` so the trained model,
//! the constant-coefficient baselines, and ground truth share one code path.
//!
//! Conventions: accuracy = (1 − NRMSE)·100 with NRMSE normalized by the true
//! signal's peak-to-peak range; rollouts that leave the blow-up bound score
//! zero; portrait cells where either field has norm < 1e-9 are excluded from
//! cosine averages (direction is undefined at equilibria).

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::surrogate::{Coefficients, State};
use crate::systems::{lerp_series, SystemSpec, Trajectory};
use crate::train::{BaselineModel, Model};

/// States beyond this magnitude abort a rollout as divergent.
pub const BLOWUP_BOUND: f64 = 1e6;
/// Norms below this make a portrait cell's direction undefined.
pub const DEGENERATE_NORM: f64 = 1e-9;
/// Portrait grid resolution per axis.
pub const GRID_RESOLUTION: usize = 41;
/// Factor by which the training bounding box is inflated for the portrait.
pub const GRID_INFLATION: f64 = 1.2;
/// Near-data mask radius as a fraction of the grid diagonal.
pub const MASK_RADIUS_FRACTION: f64 = 0.1;

#[derive(Debug)]
pub enum EvalError {
    /// The true signal's peak-to-peak range is zero; NRMSE is undefined.
    FlatSignal { trajectory: u32, channel: &'static str },
    LengthMismatch { left: usize, right: usize },
    /// Fewer than two aligned samples.
    TooShort { len: usize },
    /// Every grid cell was excluded; the comparison is meaningless.
    AllDegenerate,
    /// A scored trajectory lacks true states on the collocation grid.
    MissingTruth { trajectory: u32 },
    NoTrajectories,
    Io { path: String, source: std::io::Error },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::FlatSignal { trajectory, channel } => write!(
                f,
                "trajectory {trajectory} channel {channel}: flat true signal, \
                 peak-to-peak normalization undefined"
            ),
            EvalError::LengthMismatch { left, right } => {
                write!(f, "series lengths differ: {left} vs {right}")
            }
            EvalError::TooShort { len } => {
                write!(f, "need at least 2 aligned samples, got {len}")
            }
            EvalError::AllDegenerate => write!(
                f,
                "every portrait cell is degenerate or outside the reachable \
                 set; nothing to compare"
            ),
            EvalError::MissingTruth { trajectory } => write!(
                f,
                "trajectory {trajectory} has no true states on the \
                 collocation grid to score against"
            ),
            EvalError::NoTrajectories => write!(f, "no trajectories to evaluate"),
            EvalError::Io { path, source } => write!(f, "{path}: {source}"),
        }
    }
}

impl std::error::Error for EvalError {}

// ---------------------------------------------------------------------------
// Accuracy
// ---------------------------------------------------------------------------

/// One scored (trajectory, channel) pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccuracyScore {
    pub trajectory: u32,
    pub channel: String,
    /// RMSE over the aligned samples divided by the true peak-to-peak range.
    pub nrmse: f64,
    /// (1 − nrmse)·100; negative for badly divergent predictions.
    pub accuracy: f64,
}

/// NRMSE and accuracy of a predicted series against the true one.
pub fn accuracy_series(pred: &[f64], truth: &[f64]) -> Result<(f64, f64), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if truth.len() < 2 {
        return Err(EvalError::TooShort { len: truth.len() });
    }
    let (mut lo, mut hi, mut se) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        se += (p - t) * (p - t);
        lo = lo.min(*t);
        hi = hi.max(*t);
    }
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(EvalError::FlatSignal {
            trajectory: 0,
            channel: "?",
        });
    }
    let nrmse = (se / truth.len() as f64).sqrt() / span;
    Ok((nrmse, (1.0 - nrmse) * 100.0))
}

// ---------------------------------------------------------------------------
// Phase portraits
// ---------------------------------------------------------------------------

/// Axis-aligned portrait grid; cells are evaluated at their centers laid out
/// on an inclusive lattice from the low to the high corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub y_lo: f64,
    pub y_hi: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    pub ny: usize,
    pub nv: usize,
}

impl GridSpec {
    /// Cell centers in row-major order (y fastest).
    pub fn centers(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.ny * self.nv);
        for j in 0..self.nv {
            let v = if self.nv == 1 {
                self.v_lo
            } else {
                self.v_lo + (self.v_hi - self.v_lo) * j as f64 / (self.nv - 1) as f64
            };
            for i in 0..self.ny {
                let y = if self.ny == 1 {
                    self.y_lo
                } else {
                    self.y_lo + (self.y_hi - self.y_lo) * i as f64 / (self.ny - 1) as f64
                };
                out.push((y, v));
            }
        }
        out
    }

    pub fn diagonal(&self) -> f64 {
        (self.y_hi - self.y_lo).hypot(self.v_hi - self.v_lo)
    }
}

/// The default portrait window: the bounding box of the given states,
/// inflated about its center, at the standard resolution.
pub fn portrait_grid(points: &[(f64, f64)]) -> Result<GridSpec, EvalError> {
    if points.is_empty() {
        return Err(EvalError::NoTrajectories);
    }
    let (mut ylo, mut yhi, mut vlo, mut vhi) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(y, v) in points {
        ylo = ylo.min(y);
        yhi = yhi.max(y);
        vlo = vlo.min(v);
        vhi = vhi.max(v);
    }
    let (cy, cv) = (0.5 * (ylo + yhi), 0.5 * (vlo + vhi));
    // Degenerate boxes (single point) still get a small window.
    let hy = (0.5 * (yhi - ylo) * GRID_INFLATION).max(1e-3);
    let hv = (0.5 * (vhi - vlo) * GRID_INFLATION).max(1e-3);
    Ok(GridSpec {
        y_lo: cy - hy,
        y_hi: cy + hy,
        v_lo: cv - hv,
        v_hi: cv + hv,
        ny: GRID_RESOLUTION,
        nv: GRID_RESOLUTION,
    })
}

/// One evaluated portrait cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityCell {
    pub y: f64,
    pub v: f64,
    /// Surrogate field (dy/dt, dv/dt); `None` outside the model's domain.
    pub hat: Option<(f64, f64)>,
    /// True field; `None` outside the system's reachable set.
    pub truth: Option<(f64, f64)>,
    /// Cosine of the angle between the fields; `None` when either is
    /// missing or degenerate.
    pub cos: Option<f64>,
    /// Whether the cell lies within the near-data mask.
    pub near_data: bool,
}

/// A scored portrait comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub grid: GridSpec,
    /// Mask radius in state-space units.
    pub mask_radius: f64,
    pub average: f64,
    /// Average over near-data cells; `None` when the mask is empty.
    pub masked_average: Option<f64>,
    pub cells_used: usize,
    pub cells_masked: usize,
    pub cells: Vec<SimilarityCell>,
}

/// Compares two unforced plane fields over a grid. `data_points` drive the
/// near-data mask: a cell is masked in when within `mask_radius` (default:
/// a fixed fraction of the grid diagonal) of any data point.
pub fn cosine_similarity_map(
    surrogate: &dyn Fn(f64, f64) -> Option<(f64, f64)>,
    truth: &dyn Fn(f64, f64) -> Option<(f64, f64)>,
    grid: GridSpec,
    data_points: &[(f64, f64)],
    mask_radius: Option<f64>,
) -> Result<SimilarityMap, EvalError> {
    let radius = mask_radius.unwrap_or(MASK_RADIUS_FRACTION * grid.diagonal());
    let mut cells = Vec::with_capacity(grid.ny * grid.nv);
    let (mut sum, mut used) = (0.0, 0usize);
    let (mut msum, mut mused) = (0.0, 0usize);
    for (y, v) in grid.centers() {
        let hat = surrogate(y, v);
        let tru = truth(y, v);
        let near = data_points
            .iter()
            .any(|&(py, pv)| (py - y).hypot(pv - v) <= radius);
        let cos = match (hat, tru) {
            (Some(h), Some(t)) => {
                let (nh, nt) = (h.0.hypot(h.1), t.0.hypot(t.1));
                if nh < DEGENERATE_NORM || nt < DEGENERATE_NORM {
                    None
                } else {
                    Some((h.0 * t.0 + h.1 * t.1) / (nh * nt))
                }
            }
            _ => None,
        };
        if let Some(c) = cos {
            sum += c;
            used += 1;
            if near {
                msum += c;
                mused += 1;
            }
        }
        cells.push(SimilarityCell {
            y,
            v,
            hat,
            truth: tru,
            cos,
            near_data: near,
        });
    }
    if used == 0 {
        return Err(EvalError::AllDegenerate);
    }
    Ok(SimilarityMap {
        grid,
        mask_radius: radius,
        average: sum / used as f64,
        masked_average: (mused > 0).then(|| msum / mused as f64),
        cells_used: used,
        cells_masked: mused,
        cells,
    })
}

// ---------------------------------------------------------------------------
// Field adapters
// ---------------------------------------------------------------------------

/// The trained model's plane field under input `u`.
pub fn model_field(model: &Model) -> impl Fn(f64, f64, f64) -> Option<(f64, f64)> + '_ {
    move |y, v, u| {
        let th = model.theta(y, v, u);
        Some((v, -th.k * y - th.d * v + th.g * u))
    }
}

/// A constant-coefficient plane field (the baselines' learned dynamics).
pub fn constant_field(th: Coefficients) -> impl Fn(f64, f64, f64) -> Option<(f64, f64)> {
    move |y, v, u| Some((v, -th.k * y - th.d * v + th.g * u))
}

/// The generating system's true plane field.
pub fn truth_field(sys: &SystemSpec) -> impl Fn(f64, f64, f64) -> Option<(f64, f64)> + '_ {
    move |y, v, u| sys.plane_field(State { y, v }, u).map(|s| (s.y, s.v))
}

/// True states along a trajectory's collocation grid, used for portrait
/// bounding boxes and the near-data mask.
pub fn truth_states(trajs: &[&Trajectory]) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for traj in trajs {
        match &traj.col_truth {
            Some((ys, vs)) => pts.extend(ys.iter().copied().zip(vs.iter().copied())),
            None => pts.extend(traj.meas_y.iter().copied().zip(traj.meas_v.iter().copied())),
        }
    }
    pts
}

// ---------------------------------------------------------------------------
// Reconstruction (in-sample solution accuracy)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub scores: Vec<AccuracyScore>,
    /// Mean accuracy over every (trajectory, channel) pair.
    pub average_accuracy: f64,
    pub average_y: f64,
    pub average_v: f64,
}

/// Scores predicted states at the measurement times of each trajectory
/// against the recorded measurements, averaging across channels and
/// trajectories with equal weight.
pub fn evaluate_reconstruction(
    predict: &dyn Fn(&Trajectory) -> Vec<State>,
    trajs: &[&Trajectory],
) -> Result<ReconstructionReport, EvalError> {
    if trajs.is_empty() {
        return Err(EvalError::NoTrajectories);
    }
    let mut scores = Vec::with_capacity(trajs.len() * 2);
    let (mut sy, mut sv) = (0.0, 0.0);
    for traj in trajs {
        let pred = predict(traj);
        if pred.len() != traj.meas_t.len() {
            return Err(EvalError::LengthMismatch {
                left: pred.len(),
                right: traj.meas_t.len(),
            });
        }
        let py: Vec<f64> = pred.iter().map(|s| s.y).collect();
        let pv: Vec<f64> = pred.iter().map(|s| s.v).collect();
        for (channel, p, t) in [("y", &py, &traj.meas_y), ("v", &pv, &traj.meas_v)] {
            let (nrmse, acc) = accuracy_series(p, t).map_err(|e| match e {
                EvalError::FlatSignal { .. } => EvalError::FlatSignal {
                    trajectory: traj.id,
                    channel,
                },
                other => other,
            })?;
            if channel == "y" {
                sy += acc;
            } else {
                sv += acc;
            }
            scores.push(AccuracyScore {
                trajectory: traj.id,
                channel: channel.to_string(),
                nrmse,
                accuracy: acc,
            });
        }
    }
    let n = trajs.len() as f64;
    Ok(ReconstructionReport {
        average_accuracy: (sy + sv) / (2.0 * n),
        average_y: sy / n,
        average_v: sv / n,
        scores,
    })
}

/// Prediction adapter for the trained two-network model.
pub fn main_predictor(model: &Model) -> impl Fn(&Trajectory) -> Vec<State> + '_ {
    move |traj| {
        let film = model.context_for(traj);
        traj.meas_t
            .iter()
            .map(|&t| model.reconstruct(&film, t))
            .collect()
    }
}

/// Prediction adapter for a baseline: each trajectory is reconstructed by
/// the submodel trained on it (the shared variant has exactly one).
pub fn baseline_predictor(model: &BaselineModel) -> impl Fn(&Trajectory) -> Vec<State> + '_ {
    move |traj| {
        let sub = model
            .subs
            .iter()
            .position(|s| s.trained_on.contains(&traj.id))
            .unwrap_or(0);
        let film = model.context_for(sub, traj);
        traj.meas_t
            .iter()
            .map(|&t| model.reconstruct(sub, &film, t))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Open-loop rollout
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutScore {
    pub trajectory: u32,
    pub blew_up: bool,
    /// Per-channel NRMSE; `None` after a blow-up.
    pub nrmse_y: Option<f64>,
    pub nrmse_v: Option<f64>,
    pub accuracy_y: f64,
    pub accuracy_v: f64,
    /// Equal-weight channel average.
    pub accuracy: f64,
    /// Integrated states on the collocation grid (truncated at a blow-up);
    /// kept for plot-ready export.
    pub states: Vec<State>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutReport {
    pub scores: Vec<RolloutScore>,
    pub average_accuracy: f64,
    pub blowups: usize,
}

/// Integrates a plane field from the trajectory's true initial state along
/// its collocation grid (classic fourth-order steps, inputs interpolated
/// linearly between grid samples). Returns the visited states and whether
/// the blow-up guard tripped.
pub fn rollout_states(
    field: &dyn Fn(f64, f64, f64) -> Option<(f64, f64)>,
    traj: &Trajectory,
) -> Result<(Vec<State>, bool), EvalError> {
    let (ty, tv) = traj
        .col_truth
        .as_ref()
        .ok_or(EvalError::MissingTruth { trajectory: traj.id })?;
    let mut s = State { y: ty[0], v: tv[0] };
    let mut states = vec![s];
    let eval = |s: State, t: f64| -> (f64, f64) {
        let u = lerp_series(&traj.col_t, &traj.col_u, t);
        // Outside the model's domain the field is extended by zero motion;
        // only ground-truth fields have holes and they are not rolled out.
        field(s.y, s.v, u).unwrap_or((0.0, 0.0))
    };
    for i in 1..traj.col_t.len() {
        let t = traj.col_t[i - 1];
        let h = traj.col_t[i] - t;
        let k1 = eval(s, t);
        let k2 = eval(
            State {
                y: s.y + 0.5 * h * k1.0,
                v: s.v + 0.5 * h * k1.1,
            },
            t + 0.5 * h,
        );
        let k3 = eval(
            State {
                y: s.y + 0.5 * h * k2.0,
                v: s.v + 0.5 * h * k2.1,
            },
            t + 0.5 * h,
        );
        let k4 = eval(
            State {
                y: s.y + h * k3.0,
                v: s.v + h * k3.1,
            },
            t + h,
        );
        s = State {
            y: s.y + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            v: s.v + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        };
        if !s.y.is_finite() || !s.v.is_finite() || s.y.abs() > BLOWUP_BOUND || s.v.abs() > BLOWUP_BOUND
        {
            return Ok((states, true));
        }
        states.push(s);
    }
    Ok((states, false))
}

/// Scores one open-loop rollout against the trajectory's true states.
pub fn score_rollout(
    field: &dyn Fn(f64, f64, f64) -> Option<(f64, f64)>,
    traj: &Trajectory,
) -> Result<RolloutScore, EvalError> {
    let (states, blew_up) = rollout_states(field, traj)?;
    if blew_up {
        return Ok(RolloutScore {
            trajectory: traj.id,
            blew_up: true,
            nrmse_y: None,
            nrmse_v: None,
            accuracy_y: 0.0,
            accuracy_v: 0.0,
            accuracy: 0.0,
            states,
        });
    }
    let (ty, tv) = traj.col_truth.as_ref().expect("checked by rollout_states");
    let py: Vec<f64> = states.iter().map(|s| s.y).collect();
    let pv: Vec<f64> = states.iter().map(|s| s.v).collect();
    let flat = |channel| EvalError::FlatSignal {
        trajectory: traj.id,
        channel,
    };
    let (ny, ay) = accuracy_series(&py, ty).map_err(|e| match e {
        EvalError::FlatSignal { .. } => flat("y"),
        other => other,
    })?;
    let (nv, av) = accuracy_series(&pv, tv).map_err(|e| match e {
        EvalError::FlatSignal { .. } => flat("v"),
        other => other,
    })?;
    Ok(RolloutScore {
        trajectory: traj.id,
        blew_up: false,
        nrmse_y: Some(ny),
        nrmse_v: Some(nv),
        accuracy_y: ay,
        accuracy_v: av,
        accuracy: 0.5 * (ay + av),
        states,
    })
}

/// Scores every given trajectory and averages with equal weight.
pub fn evaluate_rollout(
    field: &dyn Fn(f64, f64, f64) -> Option<(f64, f64)>,
    trajs: &[&Trajectory],
) -> Result<RolloutReport, EvalError> {
    if trajs.is_empty() {
        return Err(EvalError::NoTrajectories);
    }
    let mut scores = Vec::with_capacity(trajs.len());
    for traj in trajs {
        scores.push(score_rollout(field, traj)?);
    }
    let avg = scores.iter().map(|s| s.accuracy).sum::<f64>() / scores.len() as f64;
    let blowups = scores.iter().filter(|s| s.blew_up).count();
    Ok(RolloutReport {
        scores,
        average_accuracy: avg,
        blowups,
    })
}

// ---------------------------------------------------------------------------
// Result documents
// ---------------------------------------------------------------------------

/// Portrait summary kept in the metrics document; the full cell table goes
/// to the portrait CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PortraitSummary {
    pub grid: GridSpec,
    pub mask_radius: f64,
    pub average: f64,
    pub masked_average: Option<f64>,
    pub cells_used: usize,
    pub cells_masked: usize,
}

impl PortraitSummary {
    pub fn of(map: &SimilarityMap) -> Self {
        PortraitSummary {
            grid: map.grid,
            mask_radius: map.mask_radius,
            average: map.average,
            masked_average: map.masked_average,
            cells_used: map.cells_used,
            cells_masked: map.cells_masked,
        }
    }
}

/// The one-file summary of evaluating a model on a dataset. Field order is
/// fixed, so equal runs serialize byte-identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub format: String,
    /// Short system tag when the dataset records its generator.
    pub system: Option<String>,
    /// Which model produced the scores: "qlpv", "ipinn", or "ipinn-m".
    pub model: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub reconstruction: Option<ReconstructionReport>,
    pub portrait: Option<PortraitSummary>,
    pub rollout: Option<RolloutReport>,
}

/// The metrics format tag.
pub const METRICS_FORMAT: &str = "qlpv-metrics-v1";

impl MetricsDoc {
    pub fn to_json(&self) -> String {
        let mut doc = self.clone();
        // The embedded rollout states are plot data, not metrics; keep the
        // JSON lean and deterministic.
        if let Some(r) = doc.rollout.as_mut() {
            for s in &mut r.scores {
                s.states.clear();
            }
        }
        serde_json::to_string_pretty(&doc).expect("metrics serialize")
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_json()).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Writes the plot-ready portrait table:
/// `y,v,fy_hat,fv_hat,fy_true,fv_true,cos` (blank fields where undefined).
pub fn write_portrait_csv(path: &Path, map: &SimilarityMap) -> Result<(), EvalError> {
    let mut out = String::from("y,v,fy_hat,fv_hat,fy_true,fv_true,cos\n");
    for c in &map.cells {
        let (hy, hv) = match c.hat {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (String::new(), String::new()),
        };
        let (ty, tv) = match c.truth {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (String::new(), String::new()),
        };
        let cos = c.cos.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{hy},{hv},{ty},{tv},{cos}\n", c.y, c.v));
    }
    fs::write(path, out).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Writes the plot-ready rollout table:
/// `traj_id,t,y_hat,v_hat,y_true,v_true` (rows stop at a blow-up).
pub fn write_rollout_csv(
    path: &Path,
    report: &RolloutReport,
    trajs: &[&Trajectory],
) -> Result<(), EvalError> {
    let mut out = String::from("traj_id,t,y_hat,v_hat,y_true,v_true\n");
    for score in &report.scores {
        let traj = trajs
            .iter()
            .find(|t| t.id == score.trajectory)
            .expect("scored trajectory is present");
        let (ty, tv) = traj.col_truth.as_ref().expect("scored implies truth");
        for (i, s) in score.states.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                traj.id, traj.col_t[i], s.y, s.v, ty[i], tv[i]
            ));
        }
    }
    fs::write(path, out).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
