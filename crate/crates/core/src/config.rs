//! Experiment configuration: network shapes, optimization schedule, loss
//! weights, and a canonical hash for artifact provenance.
//!
//! A configuration serializes to JSON with a stable field order, so its
//! SHA-256 digest identifies the experiment exactly. Every field has a
//! default, which lets config files override only what they care about.

use std::error::Error;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{CoeffNetSpec, MlpSpec, RffSpec, SolutionNetSpec};
use crate::systems::hex;

/// Optimization schedule and loss weighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs. One epoch sweeps every training trajectory once.
    pub epochs: usize,
    /// Consecutive epochs spent on the solution network per cycle.
    pub phase1_epochs: usize,
    /// Consecutive epochs spent on the coefficient network per cycle.
    pub phase2_epochs: usize,
    /// Adam step size for the solution network.
    pub lr_solution: f64,
    /// Adam step size for the coefficient network.
    pub lr_coefficient: f64,
    /// Weight on the measurement-fit loss.
    pub lambda_data: f64,
    /// Weight on the initial-condition loss.
    pub lambda_ic: f64,
    /// Weight on the dynamics-residual loss during solution-phase epochs.
    pub lambda_phys: f64,
    /// Weight on the dynamics-residual loss during coefficient-phase
    /// epochs, where the residual is the main identification signal.
    pub lambda_phys_coeff: f64,
    /// Initial weight on the regression-hint loss; decays geometrically.
    pub lambda_hint: f64,
    /// Multiplier applied to the hint weight at the start of every
    /// coefficient-phase epoch. Must lie in (0, 1].
    pub hint_decay: f64,
    /// Weight on the total-variation smoothness penalty.
    pub lambda_smooth: f64,
    /// Weight on the short-rollout consistency loss (0 disables it).
    pub lambda_rollout: f64,
    /// Number of rollout anchor points per trajectory when enabled.
    pub rollout_anchors: usize,
    /// Rollout length in collocation-grid steps when enabled.
    pub rollout_horizon: usize,
    /// Include the first-order consistency residual (dy/dt - v) in the
    /// physics loss alongside the second-order dynamics residual.
    pub kinematic_residual: bool,
    /// Base ridge regularization for the sliding-window regression hints.
    pub ridge_lambda: f64,
    /// Epochs at the very start of training with the physics loss disabled,
    /// letting the solution network fit the data before residuals bite.
    /// `None` means half of the first solution block.
    pub physics_warmup: Option<usize>,
    /// Seed for initialization and all stochastic training choices.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2400,
            phase1_epochs: 100,
            phase2_epochs: 50,
            lr_solution: 2e-3,
            lr_coefficient: 2e-3,
            lambda_data: 10.0,
            lambda_ic: 1.0,
            lambda_phys: 0.1,
            lambda_phys_coeff: 1.0,
            lambda_hint: 1.0,
            hint_decay: 0.998,
            lambda_smooth: 1e-3,
            lambda_rollout: 0.0,
            rollout_anchors: 32,
            rollout_horizon: 5,
            kinematic_residual: true,
            ridge_lambda: 1e-6,
            physics_warmup: None,
            seed: 0,
        }
    }
}

/// Complete experiment description: both networks plus the schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub solution: SolutionNetSpec,
    pub coefficient: CoeffNetSpec,
    pub train: TrainConfig,
}

#[derive(Debug)]
pub enum ConfigError {
    Invalid(String),
    Parse(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Invalid(msg) => write!(f, "invalid configuration: {msg}"),
            ConfigError::Parse(msg) => write!(f, "cannot parse configuration: {msg}"),
        }
    }
}

impl Error for ConfigError {}

impl ExperimentConfig {
    /// Parses a JSON configuration; absent fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// SHA-256 digest of the canonical (compact) JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serialization cannot fail");
        let mut h = Sha256::new();
        h.update(&canon);
        hex(&h.finalize())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.solution
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.coefficient
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.train;
        let positive = [
            (t.lr_solution, "lr_solution"),
            (t.lr_coefficient, "lr_coefficient"),
            (t.ridge_lambda, "ridge_lambda"),
        ];
        for (v, name) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        let nonnegative = [
            (t.lambda_data, "lambda_data"),
            (t.lambda_ic, "lambda_ic"),
            (t.lambda_phys, "lambda_phys"),
            (t.lambda_phys_coeff, "lambda_phys_coeff"),
            (t.lambda_hint, "lambda_hint"),
            (t.lambda_smooth, "lambda_smooth"),
            (t.lambda_rollout, "lambda_rollout"),
        ];
        for (v, name) in nonnegative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be >= 0")));
            }
        }
        if t.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be >= 1".into()));
        }
        if t.phase1_epochs == 0 || t.phase2_epochs == 0 {
            return Err(ConfigError::Invalid(
                "phase1_epochs and phase2_epochs must be >= 1".into(),
            ));
        }
        if !(t.hint_decay > 0.0 && t.hint_decay <= 1.0) {
            return Err(ConfigError::Invalid("hint_decay must be in (0, 1]".into()));
        }
        if t.lambda_rollout > 0.0 && (t.rollout_anchors == 0 || t.rollout_horizon == 0) {
            return Err(ConfigError::Invalid(
                "rollout_anchors and rollout_horizon must be >= 1 when lambda_rollout > 0".into(),
            ));
        }
        Ok(())
    }

    /// A deliberately small configuration for fast tests.
    pub fn tiny() -> Self {
        ExperimentConfig {
            solution: SolutionNetSpec {
                hidden: vec![8, 8],
                gru_hidden: 4,
                context_len: 8,
                rff: Some(RffSpec { count: 3, sigma: 1.0 }),
            },
            coefficient: CoeffNetSpec {
                hidden: vec![6],
                augment: true,
                moe: None,
            },
            train: TrainConfig {
                epochs: 12,
                phase1_epochs: 4,
                phase2_epochs: 2,
                physics_warmup: Some(2),
                ..TrainConfig::default()
            },
        }
    }
}

/// Convenience used by baseline models: the trunk shape of the solution
/// network as a plain time-to-state architecture.
pub fn plain_trunk(hidden: &[usize], inputs: usize) -> MlpSpec {
    MlpSpec {
        inputs,
        hidden: hidden.to_vec(),
        outputs: 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::tiny().validate().unwrap();
    }

    #[test]
    fn empty_json_is_the_default_config() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let cfg =
            ExperimentConfig::from_json(r#"{"train": {"seed": 9, "epochs": 7}}"#).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lr_solution, TrainConfig::default().lr_solution);
        assert_eq!(cfg.solution, SolutionNetSpec::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"trian": {}}"#).unwrap_err();
        match err {
            ConfigError::Parse(msg) => assert!(msg.contains("trian"), "{msg}"),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.train.hint_decay = 0.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.train.lr_solution = -1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.train.lambda_rollout = 0.5;
        c.train.rollout_anchors = 0;
        assert!(c.validate().is_err());
    }
}
