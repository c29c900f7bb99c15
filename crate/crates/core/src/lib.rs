//! Conformal predictive self-calibration (CPSC) for multimodal
//! classification.
//!
//! A split-conformal predictor, calibrated on held-out data, scores the
//! latent components of each modality's features. The highest-ranked
//! components are averaged into a denoised representation (representation
//! self-calibration), and each modality's unimodal loss is reweighted by how
//! highly its conformal set ranks the fused prediction (gradient
//! self-calibration).

pub mod conformal;
pub mod diagnostics;
pub mod error;
pub mod gsc;
pub mod io;
pub mod model;
pub mod numeric;
pub mod rsc;
pub mod synth;
pub mod trainer;

pub use conformal::{ConformalState, PredictionSet};
pub use error::{CpscError, Result};
pub use gsc::GscConfig;
pub use model::{CpscModel, ModelConfig};
pub use synth::{Dataset, GenSpec, LabeledSample};
pub use trainer::{run, Method, RunConfig, RunResult, Splits, TrainConfig, Trainer};
