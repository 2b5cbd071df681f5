//! Durable training snapshots. A checkpoint carries everything needed to
//! resume a run bit-exactly or to evaluate a trained model later: the full
//! experiment configuration (and its hash), the dataset fingerprint, network
//! weights, optimizer moments, the decayed hint weight, and the random
//! generator position. Files are plain JSON; floating-point values survive a
//! save/load round trip exactly.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::nn::{CoeffNet, SolutionNet, SolutionNetSpec};
use crate::surrogate::Normalization;
use crate::train::{BaselineKind, BaselineModel, BaselineSub, Model, TrainState};

/// Format tag of main-model checkpoint files.
pub const CHECKPOINT_FORMAT: &str = "qlpv-checkpoint-v1";
/// Format tag of baseline-model files.
pub const BASELINE_FORMAT: &str = "qlpv-baseline-v1";

#[derive(Debug)]
pub enum CheckpointError {
    Io { path: String, source: std::io::Error },
    Parse(String),
    /// The file is internally inconsistent or does not match the
    /// architecture it claims.
    Mismatch(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, source } => write!(f, "{path}: {source}"),
            CheckpointError::Parse(m) => write!(f, "checkpoint parse error: {m}"),
            CheckpointError::Mismatch(m) => write!(f, "checkpoint mismatch: {m}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

/// A full training snapshot of the two-network model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ExperimentConfig,
    /// Hash of `config`, for cheap compatibility checks between artifacts.
    pub config_hash: String,
    /// Fingerprint of the dataset CSV the model was trained on; empty when
    /// the dataset never touched disk.
    pub dataset_hash: String,
    pub state: TrainState,
    pub normalization: Normalization,
    /// Frozen Fourier frequencies of the solution network.
    pub solution_freqs: Vec<f64>,
    /// Concatenated weight vector: solution network then coefficient network.
    pub weights: Vec<f64>,
}

impl Checkpoint {
    /// Snapshots a model mid- or post-training.
    pub fn capture(
        config: &ExperimentConfig,
        dataset_hash: &str,
        model: &Model,
        state: &TrainState,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: config.clone(),
            config_hash: config.hash(),
            dataset_hash: dataset_hash.to_string(),
            state: state.clone(),
            normalization: model.normalization,
            solution_freqs: model.solution.freqs.clone(),
            weights: model.weights.clone(),
        }
    }

    /// Rebuilds the model and training state, validating internal
    /// consistency first.
    pub fn restore(&self) -> Result<(Model, TrainState), CheckpointError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Mismatch(format!(
                "unknown format tag {:?} (expected {CHECKPOINT_FORMAT:?})",
                self.format
            )));
        }
        if self.config_hash != self.config.hash() {
            return Err(CheckpointError::Mismatch(
                "embedded configuration does not match its recorded hash".into(),
            ));
        }
        self.config
            .validate()
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let solution =
            SolutionNet::with_freqs(self.config.solution.clone(), self.solution_freqs.clone())
                .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let coefficient = CoeffNet::new(self.config.coefficient.clone())
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let want = solution.param_count() + coefficient.param_count();
        if self.weights.len() != want {
            return Err(CheckpointError::Mismatch(format!(
                "weight vector has {} entries, architecture needs {want}",
                self.weights.len()
            )));
        }
        if self.state.solution_opt.m.len() != solution.param_count()
            || self.state.coefficient_opt.m.len() != coefficient.param_count()
        {
            return Err(CheckpointError::Mismatch(
                "optimizer moments do not match the architecture".into(),
            ));
        }
        self.normalization
            .validate()
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let model = Model {
            solution,
            coefficient,
            weights: self.weights.clone(),
            normalization: self.normalization,
        };
        Ok((model, self.state.clone()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        serde_json::from_str(text).map_err(|e| CheckpointError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }
}

/// A trained baseline model on disk: architecture, per-submodel weights, and
/// the provenance needed for controlled comparisons against the main model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineCheckpoint {
    pub format: String,
    pub kind: BaselineKind,
    /// The experiment configuration the baseline was trained under (shared
    /// with the main model in a controlled comparison).
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    /// The solution architecture actually used; the per-trajectory variant
    /// strips the conditioning encoder, so this can differ from
    /// `config.solution`.
    pub solution_spec: SolutionNetSpec,
    pub solution_freqs: Vec<f64>,
    pub normalization: Normalization,
    pub subs: Vec<BaselineSub>,
}

impl BaselineCheckpoint {
    pub fn capture(
        config: &ExperimentConfig,
        dataset_hash: &str,
        model: &BaselineModel,
    ) -> Self {
        BaselineCheckpoint {
            format: BASELINE_FORMAT.to_string(),
            kind: model.kind,
            config: config.clone(),
            config_hash: config.hash(),
            dataset_hash: dataset_hash.to_string(),
            solution_spec: model.solution.spec.clone(),
            solution_freqs: model.solution.freqs.clone(),
            normalization: model.normalization,
            subs: model.subs.clone(),
        }
    }

    pub fn restore(&self) -> Result<BaselineModel, CheckpointError> {
        if self.format != BASELINE_FORMAT {
            return Err(CheckpointError::Mismatch(format!(
                "unknown format tag {:?} (expected {BASELINE_FORMAT:?})",
                self.format
            )));
        }
        if self.config_hash != self.config.hash() {
            return Err(CheckpointError::Mismatch(
                "embedded configuration does not match its recorded hash".into(),
            ));
        }
        let solution =
            SolutionNet::with_freqs(self.solution_spec.clone(), self.solution_freqs.clone())
                .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let want = solution.param_count() + 3;
        if self.subs.is_empty() {
            return Err(CheckpointError::Mismatch(
                "baseline file lists no submodels".into(),
            ));
        }
        for (i, sub) in self.subs.iter().enumerate() {
            if sub.weights.len() != want {
                return Err(CheckpointError::Mismatch(format!(
                    "submodel {i} has {} weights, architecture needs {want}",
                    sub.weights.len()
                )));
            }
        }
        self.normalization
            .validate()
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        Ok(BaselineModel {
            kind: self.kind,
            solution,
            normalization: self.normalization,
            subs: self.subs.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("baseline checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        serde_json::from_str(text).map_err(|e| CheckpointError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{generate_dataset, GenerateConfig, SystemSpec};
    use crate::train::{train_baseline, train_from};

    fn tiny_run() -> (crate::systems::Dataset, ExperimentConfig) {
        let mut gen = GenerateConfig::for_system(SystemSpec::linear(2.0, 0.5, 1.0));
        gen.train_trajectories = 2;
        gen.test_trajectories = 1;
        gen.t_end = 2.0;
        gen.measurements = 5;
        gen.collocation = 24;
        gen.truth_dt = 0.002;
        let dataset = generate_dataset(&gen, 7).unwrap();
        let mut cfg = ExperimentConfig::tiny();
        cfg.train.epochs = 8;
        (dataset, cfg)
    }

    #[test]
    fn checkpoint_round_trip_resumes_bit_exactly() {
        let (dataset, mut cfg) = tiny_run();
        cfg.train.epochs = 10;
        let full = train_from(&dataset, &cfg, None).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.train.epochs = 5;
        let half = train_from(&dataset, &half_cfg, None).unwrap();
        let ckpt = Checkpoint::capture(&cfg, "abc123", &half.model, &half.state);
        let parsed = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        assert_eq!(parsed.weights, ckpt.weights, "weights must survive JSON");
        assert_eq!(
            parsed.state.solution_opt.m, ckpt.state.solution_opt.m,
            "moments must survive JSON"
        );

        let (model, state) = parsed.restore().unwrap();
        let resumed = train_from(&dataset, &cfg, Some((model, state))).unwrap();
        assert_eq!(resumed.model.weights, full.model.weights);
        assert_eq!(resumed.state.rng_pos(), full.state.rng_pos());
    }

    #[test]
    fn tampered_config_hash_is_rejected() {
        let (dataset, cfg) = tiny_run();
        let out = train_from(&dataset, &cfg, None).unwrap();
        let mut ckpt = Checkpoint::capture(&cfg, "", &out.model, &out.state);
        ckpt.config.train.epochs += 1;
        let err = ckpt.restore().unwrap_err();
        assert!(matches!(err, CheckpointError::Mismatch(_)), "{err}");
    }

    #[test]
    fn weight_length_mismatch_is_rejected() {
        let (dataset, cfg) = tiny_run();
        let out = train_from(&dataset, &cfg, None).unwrap();
        let mut ckpt = Checkpoint::capture(&cfg, "", &out.model, &out.state);
        ckpt.weights.pop();
        assert!(matches!(
            ckpt.restore().unwrap_err(),
            CheckpointError::Mismatch(_)
        ));
    }

    #[test]
    fn baseline_round_trip_preserves_predictions() {
        let (dataset, cfg) = tiny_run();
        let out = train_baseline(&dataset, &cfg, BaselineKind::Ipinn).unwrap();
        let ckpt = BaselineCheckpoint::capture(&cfg, "d4ta", &out.model);
        let restored = BaselineCheckpoint::from_json(&ckpt.to_json())
            .unwrap()
            .restore()
            .unwrap();
        let traj = dataset.train().next().unwrap();
        let film = out.model.context_for(0, traj);
        let film2 = restored.context_for(0, traj);
        let a = out.model.reconstruct(0, &film, 1.0);
        let b = restored.reconstruct(0, &film2, 1.0);
        assert_eq!(a.y.to_bits(), b.y.to_bits());
        assert_eq!(a.v.to_bits(), b.v.to_bits());
        let ta = out.model.mean_theta();
        let tb = restored.mean_theta();
        assert_eq!(ta.k.to_bits(), tb.k.to_bits());
    }

    #[test]
    fn save_and_load_hit_the_filesystem() {
        let (dataset, cfg) = tiny_run();
        let out = train_from(&dataset, &cfg, None).unwrap();
        let ckpt = Checkpoint::capture(&cfg, "fsfs", &out.model, &out.state);
        let dir = std::env::temp_dir().join("qlpv-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.weights, ckpt.weights);
        assert_eq!(loaded.dataset_hash, "fsfs");
        std::fs::remove_dir_all(&dir).ok();
    }
}
