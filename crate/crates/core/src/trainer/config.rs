use serde::{Deserialize, Serialize};

use crate::error::{CpscError, Result};
use crate::gsc::GscConfig;
use crate::model::ModelConfig;
use crate::numeric::OptimizerKind;
use crate::synth::GenSpec;

/// When accumulated gradients are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    PerBatch,
    /// One step per epoch on the mean of the batch gradients.
    PerEpoch,
}

/// Forward path used to score the calibration set on refresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPath {
    /// Raw encoder features into the fusion head.
    Fused,
    /// Decompose, select by the previous predictor, reconstruct, fuse.
    Rsc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Warm-up epochs `t0`.
    pub warmup_epochs: usize,
    /// Total epochs `E`, warm-up included.
    pub total_epochs: usize,
    pub batch_size: usize,
    /// Conformal risk level.
    pub alpha: f64,
    /// Refresh the conformal predictor every this many self-calibration epochs.
    pub cp_update_interval: usize,
    pub optimizer: OptimizerKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gsc: GscConfig,
    pub seed: u64,
    pub calibration_fraction: f64,
    pub update_mode: UpdateMode,
    pub refresh_path: RefreshPath,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 5,
            total_epochs: 60,
            batch_size: 32,
            alpha: 0.1,
            cp_update_interval: 1,
            optimizer: OptimizerKind::adam(1e-3),
            lambda1: 0.8,
            lambda2: 0.2,
            gsc: GscConfig::default(),
            seed: 0,
            calibration_fraction: 0.2,
            update_mode: UpdateMode::PerBatch,
            refresh_path: RefreshPath::Fused,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CpscError::Config(m));
        if self.warmup_epochs >= self.total_epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.cp_update_interval == 0 {
            return bad("cp_update_interval must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction <= 0.5) {
            return bad(format!(
                "calibration_fraction must be in (0, 0.5], got {}",
                self.calibration_fraction
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0,1), got {}", self.alpha));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative".into());
        }
        self.optimizer.validate()?;
        self.gsc.validate()
    }
}

/// Synthetic benchmark layout: one stream of samples cut into a train+cal
/// pool and a disjoint test range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: GenSpec,
    /// Samples for training and calibration together.
    pub pool_size: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: GenSpec::imbalanced(&[1.0, 0.3], 4, 2500, 0),
            pool_size: 2500,
            test_size: 1000,
        }
    }
}

/// Everything one run needs, as read from the run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CpscError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.input_dims != self.data.generator.input_dims() {
            return Err(CpscError::Config(format!(
                "model input_dims {:?} do not match generator widths {:?}",
                self.model.input_dims,
                self.data.generator.input_dims()
            )));
        }
        if self.model.classes != self.data.generator.classes {
            return Err(CpscError::Config("model and generator class counts differ".into()));
        }
        Ok(())
    }

    /// Applies the seed to both the generator and the trainer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.generator.seed = seed;
        self.train.seed = seed;
        self
    }
}
