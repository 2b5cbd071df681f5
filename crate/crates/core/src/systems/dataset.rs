//! Trajectory data: generation from the benchmark systems, the on-disk
//! format, and normalization.
//!
//! A dataset is a CSV of rows `traj_id,kind,t,y,v,u` plus a JSON sidecar.
//! Kind `m` rows are noisy state measurements at jittered times; kind `c`
//! rows form a uniform grid per trajectory carrying the exact input samples
//! and — when the data came from a known system — the true states, which
//! evaluation uses as its reference. The sidecar stores provenance (system,
//! input recipe, seed, noise level), the train/test split, and the affine
//! normalization computed from the training split.
//!
//! Floats are written in shortest round-trip decimal form, so save/load is
//! bit-exact and file hashes are stable across platforms.

use super::{simulate_truth, InputSpec, SystemSpec};
use crate::nn::standard_normal;
use crate::surrogate::{Affine, Normalization, State};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum DatasetError {
    Io(std::io::Error),
    /// CSV problem at a 1-based line number.
    Parse {
        line: usize,
        msg: String,
    },
    MissingSidecar(PathBuf),
    BadSidecar(String),
    BadConfig(String),
    Inconsistent(String),
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Io(e) => write!(f, "dataset io: {e}"),
            DatasetError::Parse { line, msg } => write!(f, "csv line {line}: {msg}"),
            DatasetError::MissingSidecar(p) => {
                write!(f, "missing sidecar json next to the csv: {}", p.display())
            }
            DatasetError::BadSidecar(msg) => write!(f, "bad sidecar: {msg}"),
            DatasetError::BadConfig(msg) => write!(f, "bad generation config: {msg}"),
            DatasetError::Inconsistent(msg) => write!(f, "inconsistent dataset: {msg}"),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e)
    }
}

/// One trajectory's worth of data. Measurement and collocation series are
/// kept sorted by time; `col_truth` is present when the grid rows carried
/// true states.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u32,
    pub meas_t: Vec<f64>,
    pub meas_y: Vec<f64>,
    pub meas_v: Vec<f64>,
    pub meas_u: Vec<f64>,
    pub col_t: Vec<f64>,
    pub col_u: Vec<f64>,
    /// True (y, v) on the collocation grid, if recorded.
    pub col_truth: Option<(Vec<f64>, Vec<f64>)>,
}

impl Trajectory {
    /// Initial state for rollouts: the true state at the first grid time.
    pub fn true_initial_state(&self) -> Option<State> {
        self.col_truth.as_ref().map(|(y, v)| State { y: y[0], v: v[0] })
    }
}

/// Evenly spread subsample of at most `max` entries (always keeps the first
/// and last when trimming).
pub fn subsample_even(xs: &[f64], max: usize) -> Vec<f64> {
    let n = xs.len();
    if n <= max || max == 0 {
        return xs.to_vec();
    }
    if max == 1 {
        return vec![xs[0]];
    }
    (0..max)
        .map(|i| {
            let idx = (i as f64 * (n - 1) as f64 / (max - 1) as f64).round() as usize;
            xs[idx.min(n - 1)]
        })
        .collect()
}

/// Linear interpolation over a sorted, possibly non-uniform time series,
/// clamped at the ends.
pub fn lerp_series(ts: &[f64], vs: &[f64], t: f64) -> f64 {
    debug_assert_eq!(ts.len(), vs.len());
    debug_assert!(!ts.is_empty());
    if t <= ts[0] {
        return vs[0];
    }
    let last = ts.len() - 1;
    if t >= ts[last] {
        return vs[last];
    }
    // partition_point: first index with ts[idx] > t; t < ts[last] here.
    let hi = ts.partition_point(|&x| x <= t);
    let lo = hi - 1;
    let span = ts[hi] - ts[lo];
    if span <= 0.0 {
        return vs[lo];
    }
    let w = (t - ts[lo]) / span;
    vs[lo] + w * (vs[hi] - vs[lo])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Generating system, when known.
    pub system: Option<SystemSpec>,
    /// Excitation recipe, when known.
    pub input: Option<InputSpec>,
    pub seed: u64,
    pub noise_sigma: f64,
    pub t_end: f64,
    pub normalization: Normalization,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn trajectory(&self, id: u32) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    pub fn train(&self) -> impl Iterator<Item = &Trajectory> {
        self.train_ids.iter().filter_map(|&id| self.trajectory(id))
    }

    pub fn test(&self) -> impl Iterator<Item = &Trajectory> {
        self.test_ids.iter().filter_map(|&id| self.trajectory(id))
    }

    /// Writes the CSV and its sidecar (same path with a `.json` extension).
    pub fn save(&self, csv_path: &Path) -> Result<(), DatasetError> {
        let mut out = String::new();
        out.push_str("traj_id,kind,t,y,v,u\n");
        for traj in &self.trajectories {
            for i in 0..traj.meas_t.len() {
                out.push_str(&format!(
                    "{},m,{},{},{},{}\n",
                    traj.id, traj.meas_t[i], traj.meas_y[i], traj.meas_v[i], traj.meas_u[i]
                ));
            }
            for i in 0..traj.col_t.len() {
                match &traj.col_truth {
                    Some((y, v)) => out.push_str(&format!(
                        "{},c,{},{},{},{}\n",
                        traj.id, traj.col_t[i], y[i], v[i], traj.col_u[i]
                    )),
                    None => out.push_str(&format!(
                        "{},c,{},,,{}\n",
                        traj.id, traj.col_t[i], traj.col_u[i]
                    )),
                }
            }
        }
        let mut f = std::fs::File::create(csv_path)?;
        f.write_all(out.as_bytes())?;
        let sidecar = Sidecar {
            format_version: 1,
            system: self.system,
            input: self.input,
            seed: self.seed,
            noise_sigma: self.noise_sigma,
            t_end: self.t_end,
            train_ids: self.train_ids.clone(),
            test_ids: self.test_ids.clone(),
            normalization: self.normalization,
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| DatasetError::BadSidecar(e.to_string()))?;
        std::fs::write(sidecar_path(csv_path), json)?;
        Ok(())
    }

    /// Loads a CSV plus sidecar pair.
    pub fn load(csv_path: &Path) -> Result<Dataset, DatasetError> {
        let side_path = sidecar_path(csv_path);
        if !side_path.exists() {
            return Err(DatasetError::MissingSidecar(side_path));
        }
        let side_text = std::fs::read_to_string(&side_path)?;
        let side: Sidecar = serde_json::from_str(&side_text)
            .map_err(|e| DatasetError::BadSidecar(e.to_string()))?;
        side.normalization
            .validate()
            .map_err(|e| DatasetError::BadSidecar(e.to_string()))?;

        let text = std::fs::read_to_string(csv_path)?;
        let mut rows: BTreeMap<u32, RawRows> = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if idx == 0 {
                let header: Vec<&str> = line.split(',').map(str::trim).collect();
                if header != ["traj_id", "kind", "t", "y", "v", "u"] {
                    return Err(DatasetError::Parse {
                        line: line_no,
                        msg: format!("expected header traj_id,kind,t,y,v,u; got {line}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(DatasetError::Parse {
                    line: line_no,
                    msg: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let id: u32 = fields[0].trim().parse().map_err(|_| DatasetError::Parse {
                line: line_no,
                msg: format!("bad traj_id {:?}", fields[0]),
            })?;
            let kind = fields[1].trim();
            let t = parse_req(fields[2], "t", line_no)?;
            let u = parse_req(fields[5], "u", line_no)?;
            let entry = rows.entry(id).or_default();
            match kind {
                "m" => {
                    let y = parse_req(fields[3], "y", line_no)?;
                    let v = parse_req(fields[4], "v", line_no)?;
                    entry.meas.push((t, y, v, u));
                }
                "c" => {
                    let y = parse_opt(fields[3], "y", line_no)?;
                    let v = parse_opt(fields[4], "v", line_no)?;
                    entry.col.push((t, y, v, u));
                }
                other => {
                    return Err(DatasetError::Parse {
                        line: line_no,
                        msg: format!("unknown row kind {other:?} (expected m or c)"),
                    });
                }
            }
        }

        let mut trajectories = Vec::with_capacity(rows.len());
        for (id, mut raw) in rows {
            raw.meas
                .sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
            raw.col
                .sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
            if raw.col.len() < 2 {
                return Err(DatasetError::Inconsistent(format!(
                    "trajectory {id} has {} grid rows; need at least 2",
                    raw.col.len()
                )));
            }
            if raw.meas.is_empty() {
                return Err(DatasetError::Inconsistent(format!(
                    "trajectory {id} has no measurement rows"
                )));
            }
            let with_truth = raw.col.iter().filter(|r| r.1.is_some() && r.2.is_some()).count();
            let col_truth = if with_truth == raw.col.len() {
                Some((
                    raw.col.iter().map(|r| r.1.unwrap()).collect(),
                    raw.col.iter().map(|r| r.2.unwrap()).collect(),
                ))
            } else if with_truth == 0 {
                None
            } else {
                return Err(DatasetError::Inconsistent(format!(
                    "trajectory {id} mixes grid rows with and without true states"
                )));
            };
            trajectories.push(Trajectory {
                id,
                meas_t: raw.meas.iter().map(|r| r.0).collect(),
                meas_y: raw.meas.iter().map(|r| r.1).collect(),
                meas_v: raw.meas.iter().map(|r| r.2).collect(),
                meas_u: raw.meas.iter().map(|r| r.3).collect(),
                col_t: raw.col.iter().map(|r| r.0).collect(),
                col_u: raw.col.iter().map(|r| r.3).collect(),
                col_truth,
            });
        }

        let present: Vec<u32> = trajectories.iter().map(|t| t.id).collect();
        for id in side.train_ids.iter().chain(&side.test_ids) {
            if !present.contains(id) {
                return Err(DatasetError::Inconsistent(format!(
                    "sidecar references trajectory {id} that is not in the csv"
                )));
            }
        }
        for id in &present {
            if !side.train_ids.contains(id) && !side.test_ids.contains(id) {
                return Err(DatasetError::Inconsistent(format!(
                    "trajectory {id} is in neither split"
                )));
            }
        }

        Ok(Dataset {
            system: side.system,
            input: side.input,
            seed: side.seed,
            noise_sigma: side.noise_sigma,
            t_end: side.t_end,
            normalization: side.normalization,
            train_ids: side.train_ids,
            test_ids: side.test_ids,
            trajectories,
        })
    }
}

fn parse_req(field: &str, name: &str, line: usize) -> Result<f64, DatasetError> {
    field.trim().parse().map_err(|_| DatasetError::Parse {
        line,
        msg: format!("bad {name} value {field:?}"),
    })
}

fn parse_opt(field: &str, name: &str, line: usize) -> Result<Option<f64>, DatasetError> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    parse_req(f, name, line).map(Some)
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// SHA-256 over the CSV bytes followed by the sidecar bytes, hex encoded.
/// Identifies the exact dataset a model was trained on.
pub fn dataset_hash(csv_path: &Path) -> Result<String, DatasetError> {
    let side = sidecar_path(csv_path);
    if !side.exists() {
        return Err(DatasetError::MissingSidecar(side));
    }
    let mut h = Sha256::new();
    h.update(std::fs::read(csv_path)?);
    h.update(std::fs::read(side)?);
    Ok(hex(&h.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    system: Option<SystemSpec>,
    input: Option<InputSpec>,
    seed: u64,
    noise_sigma: f64,
    t_end: f64,
    train_ids: Vec<u32>,
    test_ids: Vec<u32>,
    normalization: Normalization,
}

#[derive(Default)]
struct RawRows {
    meas: Vec<(f64, f64, f64, f64)>,
    col: Vec<(f64, Option<f64>, Option<f64>, f64)>,
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub system: SystemSpec,
    pub input: InputSpec,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    /// Trajectory length in seconds.
    pub t_end: f64,
    /// Noisy measurements per trajectory.
    pub measurements: usize,
    /// Uniform grid points per trajectory (input samples + truth states).
    pub collocation: usize,
    /// Measurement noise standard deviation, both state channels.
    pub noise_sigma: f64,
    /// Reference integrator step bound; must be at most `1e-3 * t_end`.
    pub truth_dt: f64,
    /// Initial-condition box in simulation coordinates; system default when
    /// absent.
    #[serde(default)]
    pub ic_box: Option<([f64; 2], [f64; 2])>,
}

impl GenerateConfig {
    /// Benchmark defaults for a system.
    pub fn for_system(system: SystemSpec) -> Self {
        GenerateConfig {
            system,
            input: InputSpec::default_multisine(),
            train_trajectories: 6,
            test_trajectories: 3,
            t_end: 10.0,
            measurements: 25,
            collocation: 128,
            noise_sigma: 0.02,
            truth_dt: 0.005,
            ic_box: None,
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let fail = |msg: String| Err(DatasetError::BadConfig(msg));
        if self.train_trajectories == 0 {
            return fail("need at least one training trajectory".into());
        }
        if !(self.t_end > 0.0) {
            return fail(format!("t_end must be positive, got {}", self.t_end));
        }
        if self.measurements < 2 {
            return fail("need at least 2 measurements per trajectory".into());
        }
        if self.collocation < 4 * self.measurements {
            return fail(format!(
                "grid must be at least 4x the measurement count ({} < {})",
                self.collocation,
                4 * self.measurements
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.truth_dt > 0.0) || self.truth_dt > 1e-3 * self.t_end {
            return fail(format!(
                "truth_dt must be in (0, {}] for t_end {}",
                1e-3 * self.t_end,
                self.t_end
            ));
        }
        Ok(())
    }
}

/// Simulates the configured system and assembles a dataset. Deterministic in
/// `(config, seed)`: each trajectory derives its own generator from the seed
/// and its index, so regenerating with a different trajectory count leaves
/// shared indices identical.
pub fn generate_dataset(config: &GenerateConfig, seed: u64) -> Result<Dataset, DatasetError> {
    config.validate()?;
    let total = config.train_trajectories + config.test_trajectories;
    let (ic_lo, ic_hi) = config.ic_box.unwrap_or(config.system.default_ic_box());
    let n_d = config.measurements;
    let n_c = config.collocation;
    let mut trajectories = Vec::with_capacity(total);
    for j in 0..total {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let x0 = State {
            y: rng.gen_range(ic_lo[0]..=ic_hi[0]),
            v: rng.gen_range(ic_lo[1]..=ic_hi[1]),
        };
        let input = config.input.realize(&mut rng, config.t_end);
        // Jittered measurement grid; the first sample stays at t = 0 so the
        // initial condition is observed.
        let spacing = config.t_end / (n_d - 1) as f64;
        let mut meas_t = Vec::with_capacity(n_d);
        meas_t.push(0.0);
        for i in 1..n_d {
            let jitter: f64 = rng.gen_range(-0.35..0.35);
            meas_t.push(((i as f64 + jitter) * spacing).clamp(0.0, config.t_end));
        }
        let col_t: Vec<f64> = (0..n_c)
            .map(|i| i as f64 * config.t_end / (n_c - 1) as f64)
            .collect();
        // One merged ascending pass through the integrator hits every
        // requested time exactly.
        let mut events: Vec<(f64, bool, usize)> = meas_t
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, true, i))
            .chain(col_t.iter().enumerate().map(|(i, &t)| (t, false, i)))
            .collect();
        events.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
        let times: Vec<f64> = events.iter().map(|e| e.0).collect();
        let sims = simulate_truth(&config.system, x0, &input, &times, config.truth_dt);
        let mut meas_clean = vec![State { y: 0.0, v: 0.0 }; n_d];
        let mut col_y = vec![0.0; n_c];
        let mut col_v = vec![0.0; n_c];
        for ((t, is_meas, idx), sim) in events.iter().zip(&sims) {
            let obs = config.system.observe(*sim, input.value(*t));
            if *is_meas {
                meas_clean[*idx] = obs;
            } else {
                col_y[*idx] = obs.y;
                col_v[*idx] = obs.v;
            }
        }
        // Noise draws happen in measurement order even when sigma is zero,
        // so datasets differing only in sigma share everything else.
        let mut meas_y = Vec::with_capacity(n_d);
        let mut meas_v = Vec::with_capacity(n_d);
        for clean in &meas_clean {
            meas_y.push(clean.y + config.noise_sigma * standard_normal(&mut rng));
            meas_v.push(clean.v + config.noise_sigma * standard_normal(&mut rng));
        }
        let meas_u: Vec<f64> = meas_t.iter().map(|&t| input.value(t)).collect();
        let col_u: Vec<f64> = col_t.iter().map(|&t| input.value(t)).collect();
        trajectories.push(Trajectory {
            id: j as u32,
            meas_t,
            meas_y,
            meas_v,
            meas_u,
            col_t,
            col_u,
            col_truth: Some((col_y, col_v)),
        });
    }
    let train_ids: Vec<u32> = (0..config.train_trajectories as u32).collect();
    let test_ids: Vec<u32> =
        (config.train_trajectories as u32..total as u32).collect();
    let normalization = fit_normalization(&trajectories, &train_ids, config.t_end);
    Ok(Dataset {
        system: Some(config.system),
        input: Some(config.input),
        seed,
        noise_sigma: config.noise_sigma,
        t_end: config.t_end,
        normalization,
        train_ids,
        test_ids,
        trajectories,
    })
}

/// Affine maps sending each training-split channel to [-1, 1] (midrange to
/// zero). Time maps [0, t_end] the same way. Flat channels get unit scale.
pub fn fit_normalization(
    trajectories: &[Trajectory],
    train_ids: &[u32],
    t_end: f64,
) -> Normalization {
    let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 3]; // y, v, u
    let mut feed = |slot: usize, x: f64| {
        let r = &mut ranges[slot];
        r.0 = r.0.min(x);
        r.1 = r.1.max(x);
    };
    for traj in trajectories.iter().filter(|t| train_ids.contains(&t.id)) {
        for &y in &traj.meas_y {
            feed(0, y);
        }
        for &v in &traj.meas_v {
            feed(1, v);
        }
        for &u in traj.meas_u.iter().chain(&traj.col_u) {
            feed(2, u);
        }
    }
    let affine = |(lo, hi): (f64, f64)| {
        if !(lo.is_finite() && hi.is_finite()) || hi - lo < 1e-12 {
            Affine {
                offset: if lo.is_finite() { (lo + hi) / 2.0 } else { 0.0 },
                scale: 1.0,
            }
        } else {
            Affine {
                offset: (lo + hi) / 2.0,
                scale: (hi - lo) / 2.0,
            }
        }
    };
    Normalization {
        t: Affine {
            offset: t_end / 2.0,
            scale: t_end / 2.0,
        },
        y: affine(ranges[0]),
        v: affine(ranges[1]),
        u: affine(ranges[2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenerateConfig {
        GenerateConfig {
            system: SystemSpec::duffing(),
            input: InputSpec::default_multisine(),
            train_trajectories: 3,
            test_trajectories: 2,
            t_end: 4.0,
            measurements: 10,
            collocation: 40,
            noise_sigma: 0.05,
            truth_dt: 0.004,
            ic_box: None,
        }
    }

    #[test]
    fn generated_shape_and_grid() {
        let ds = generate_dataset(&small_config(), 42).unwrap();
        assert_eq!(ds.trajectories.len(), 5);
        assert_eq!(ds.train_ids, vec![0, 1, 2]);
        assert_eq!(ds.test_ids, vec![3, 4]);
        for traj in &ds.trajectories {
            assert_eq!(traj.meas_t.len(), 10);
            assert_eq!(traj.col_t.len(), 40);
            assert_eq!(traj.meas_t[0], 0.0);
            assert_eq!(traj.col_t[0], 0.0);
            assert!((traj.col_t[39] - 4.0).abs() < 1e-12);
            assert!(traj.meas_t.windows(2).all(|w| w[0] <= w[1]));
            assert!(traj.col_truth.is_some());
            let (y, v) = traj.col_truth.as_ref().unwrap();
            assert!(y.iter().chain(v).all(|x| x.is_finite()));
        }
    }

    #[test]
    fn generation_is_deterministic_and_noise_isolated() {
        let cfg = small_config();
        let a = generate_dataset(&cfg, 7).unwrap();
        let b = generate_dataset(&cfg, 7).unwrap();
        assert_eq!(a, b);
        // Same seed, zero noise: identical in everything but the measured
        // states, which then equal the truth sampled at the same times.
        let mut clean_cfg = cfg.clone();
        clean_cfg.noise_sigma = 0.0;
        let clean = generate_dataset(&clean_cfg, 7).unwrap();
        for (na, nc) in a.trajectories.iter().zip(&clean.trajectories) {
            assert_eq!(na.meas_t, nc.meas_t);
            assert_eq!(na.col_u, nc.col_u);
            assert_eq!(na.col_truth, nc.col_truth);
            // Noisy and clean measurements differ (with overwhelming
            // probability) but stay within a few sigma.
            let max_dev = na
                .meas_y
                .iter()
                .zip(&nc.meas_y)
                .map(|(x, c)| (x - c).abs())
                .fold(0.0f64, f64::max);
            assert!(max_dev > 0.0 && max_dev < 0.05 * 6.0);
        }
        // Different seed changes the data.
        let c = generate_dataset(&cfg, 8).unwrap();
        assert_ne!(a.trajectories[0].meas_y, c.trajectories[0].meas_y);
    }

    #[test]
    fn noise_magnitude_matches_sigma() {
        let mut cfg = small_config();
        cfg.noise_sigma = 0.1;
        cfg.measurements = 50;
        cfg.collocation = 200;
        let noisy = generate_dataset(&cfg, 3).unwrap();
        let mut clean_cfg = cfg.clone();
        clean_cfg.noise_sigma = 0.0;
        let clean = generate_dataset(&clean_cfg, 3).unwrap();
        let mut devs = Vec::new();
        for (na, nc) in noisy.trajectories.iter().zip(&clean.trajectories) {
            for (x, c) in na.meas_y.iter().zip(&nc.meas_y) {
                devs.push((x - c).abs());
            }
            for (x, c) in na.meas_v.iter().zip(&nc.meas_v) {
                devs.push((x - c).abs());
            }
        }
        // E|N(0, sigma)| = sigma * sqrt(2/pi) ~ 0.0798 for sigma = 0.1.
        let mean: f64 = devs.iter().sum::<f64>() / devs.len() as f64;
        assert!((0.065..0.095).contains(&mean), "mean |noise| = {mean}");
    }

    #[test]
    fn normalized_training_data_sits_in_unit_range() {
        let ds = generate_dataset(&small_config(), 11).unwrap();
        ds.normalization.validate().unwrap();
        for traj in ds.train() {
            for &y in &traj.meas_y {
                let n = ds.normalization.y.normalize(y);
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&n));
            }
            for &v in &traj.meas_v {
                let n = ds.normalization.v.normalize(v);
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&n));
            }
            for &u in &traj.col_u {
                let n = ds.normalization.u.normalize(u);
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&n));
            }
            for &t in &traj.meas_t {
                let n = ds.normalization.t.normalize(t);
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&n));
            }
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("qlpv_ds_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("data.csv");
        let ds = generate_dataset(&small_config(), 99).unwrap();
        ds.save(&csv).unwrap();
        let back = Dataset::load(&csv).unwrap();
        assert_eq!(ds, back);
        let h1 = dataset_hash(&csv).unwrap();
        assert_eq!(h1.len(), 64);
        // Saving the loaded copy reproduces the exact same files.
        let csv2 = dir.join("data2.csv");
        back.save(&csv2).unwrap();
        assert_eq!(
            std::fs::read(&csv).unwrap(),
            std::fs::read(&csv2).unwrap()
        );
        let h2 = dataset_hash(&csv2).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn truthless_grid_rows_round_trip() {
        let mut ds = generate_dataset(&small_config(), 5).unwrap();
        for traj in &mut ds.trajectories {
            traj.col_truth = None;
        }
        let dir = std::env::temp_dir().join("qlpv_ds_truthless");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("data.csv");
        ds.save(&csv).unwrap();
        let back = Dataset::load(&csv).unwrap();
        assert_eq!(ds, back);
        assert!(back.trajectories[0].col_truth.is_none());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = std::env::temp_dir().join("qlpv_ds_badcsv");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("bad.csv");
        let ds = generate_dataset(&small_config(), 1).unwrap();
        ds.save(&csv).unwrap();
        // Corrupt line 3.
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "0,m,not_a_number,1,2,3";
        std::fs::write(&csv, lines.join("\n")).unwrap();
        match Dataset::load(&csv) {
            Err(DatasetError::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains('t'), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_sidecar_is_reported() {
        let dir = std::env::temp_dir().join("qlpv_ds_nosidecar");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("data.csv");
        let ds = generate_dataset(&small_config(), 2).unwrap();
        ds.save(&csv).unwrap();
        std::fs::remove_file(sidecar_path(&csv)).unwrap();
        assert!(matches!(
            Dataset::load(&csv),
            Err(DatasetError::MissingSidecar(_))
        ));
    }

    #[test]
    fn two_tank_initial_conditions_respect_box() {
        let mut cfg = small_config();
        cfg.system = SystemSpec::two_tank();
        let ds = generate_dataset(&cfg, 21).unwrap();
        for traj in &ds.trajectories {
            // Levels start in [0.5, 2]; the observed y is the tank-2 level.
            let (y, _) = traj.col_truth.as_ref().unwrap();
            assert!((0.5..=2.0).contains(&y[0]), "h2(0) = {}", y[0]);
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = small_config();
        cfg.collocation = 10; // below 4x measurements
        assert!(matches!(
            generate_dataset(&cfg, 0),
            Err(DatasetError::BadConfig(_))
        ));
        let mut cfg = small_config();
        cfg.truth_dt = 0.1; // coarser than 1e-3 * t_end
        assert!(matches!(
            generate_dataset(&cfg, 0),
            Err(DatasetError::BadConfig(_))
        ));
    }

    #[test]
    fn lerp_series_handles_interior_and_ends() {
        let ts = [0.0, 1.0, 3.0];
        let vs = [2.0, 4.0, 0.0];
        assert_eq!(lerp_series(&ts, &vs, -1.0), 2.0);
        assert_eq!(lerp_series(&ts, &vs, 0.0), 2.0);
        assert_eq!(lerp_series(&ts, &vs, 0.5), 3.0);
        assert_eq!(lerp_series(&ts, &vs, 2.0), 2.0);
        assert_eq!(lerp_series(&ts, &vs, 3.0), 0.0);
        assert_eq!(lerp_series(&ts, &vs, 9.0), 0.0);
    }

    #[test]
    fn subsample_keeps_ends_and_spreads() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(subsample_even(&xs, 20), xs);
        let s = subsample_even(&xs, 4);
        assert_eq!(s, vec![0.0, 3.0, 6.0, 9.0]);
        assert_eq!(subsample_even(&xs, 1), vec![0.0]);
    }
}
