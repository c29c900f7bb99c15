//! Gradient self-calibration: per-sample, per-modality reliability against
//! the fused prediction, mapped through `w(ρ) = a·ρ + b` onto the unimodal
//! cross-entropy gradients.

use serde::{Deserialize, Serialize};

use crate::conformal::ConformalState;
use crate::error::{dim_err, CpscError, Result};
use crate::model::{CpscModel, HeadSeeds, SampleCache};
use crate::numeric::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GscConfig {
    pub a: f64,
    pub b: f64,
}

impl Default for GscConfig {
    fn default() -> Self {
        Self { a: 1.0, b: 0.5 }
    }
}

impl GscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b < 0.0 || self.a + self.b < 0.0 || !self.a.is_finite() || !self.b.is_finite() {
            return Err(CpscError::Config(format!(
                "weight a·ρ + b must be non-negative on [0,1] (a = {}, b = {})",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

pub fn weight(rho: f64, cfg: &GscConfig) -> f64 {
    cfg.a * rho + cfg.b
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityReliability {
    /// Fused prediction used as the target.
    pub fused_label: usize,
    pub rho: Vec<f64>,
}

/// Reliability of each modality's unimodal prediction on its calibrated
/// feature, ranked against the fused argmax (never the ground truth).
pub fn modality_reliability(
    model: &CpscModel,
    conformal: Option<&ConformalState>,
    calibrated: &[Vec<f64>],
    fused_probs: &[f64],
) -> Result<ModalityReliability> {
    let cp = conformal.ok_or_else(|| CpscError::Calibration("conformal predictor not calibrated".into()))?;
    if calibrated.len() != model.modalities() {
        return Err(dim_err(format!(
            "{} calibrated features for {} modalities",
            calibrated.len(),
            model.modalities()
        )));
    }
    let fused_label = argmax(fused_probs);
    let rho = calibrated
        .iter()
        .enumerate()
        .map(|(m, h)| Ok(cp.rank_reliability(&model.unimodal_predict(m, h)?, fused_label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModalityReliability { fused_label, rho })
}

/// Same as [`modality_reliability`] but reusing the unimodal probabilities
/// already held in a forward cache.
pub fn cached_modality_reliability(cp: &ConformalState, cache: &SampleCache) -> ModalityReliability {
    let fused_label = argmax(&cache.fused_probs);
    let rho = cache
        .modalities
        .iter()
        .map(|mc| cp.rank_reliability(&mc.unimodal_probs, fused_label))
        .collect();
    ModalityReliability { fused_label, rho }
}

/// Accumulates `(1/|B|) Σᵢ wᵢᵐ ∇ CE(ŷᵢᵐ, yᵢ)` for every modality.
///
/// `weights[i][m]` is the weight of sample `i`, modality `m`.
pub fn weighted_unimodal_backward(model: &mut CpscModel, caches: &[SampleCache], weights: &[Vec<f64>]) -> Result<()> {
    if caches.len() != weights.len() {
        return Err(dim_err(format!("{} caches for {} weight rows", caches.len(), weights.len())));
    }
    let m_count = model.modalities();
    if let Some(row) = weights.iter().find(|w| w.len() != m_count) {
        return Err(dim_err(format!("weight row of length {}, expected {m_count}", row.len())));
    }
    let scale = 1.0 / caches.len() as f64;
    for (cache, w) in caches.iter().zip(weights) {
        let seeds = HeadSeeds {
            unimodal: w.iter().map(|wi| wi * scale).collect(),
            ..HeadSeeds::zeros(m_count)
        };
        model.backward(cache, &seeds)?;
    }
    Ok(())
}

/// Trace of the covariance of per-sample gradient estimators, with and
/// without reweighting.
///
/// The weighted estimator for sample `i` is `(wᵢ / w̄) gᵢ`, so uniform weights
/// reproduce the unweighted value exactly. Returns `(weighted, unweighted)`.
pub fn variance_diagnostic(samples: &[Vec<f64>], weights: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(CpscError::Statistics(format!(
            "variance needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.len() != weights.len() {
        return Err(dim_err(format!("{} samples for {} weights", samples.len(), weights.len())));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(dim_err("gradient samples differ in length"));
    }
    let mean_w = weights.iter().sum::<f64>() / weights.len() as f64;
    let unweighted = trace_covariance(samples.to_vec(), dim);
    let weighted = if mean_w > 0.0 {
        trace_covariance(
            samples
                .iter()
                .zip(weights)
                .map(|(s, w)| s.iter().map(|x| x * w / mean_w).collect())
                .collect(),
            dim,
        )
    } else {
        0.0
    };
    Ok((weighted, unweighted))
}

fn trace_covariance(rows: Vec<Vec<f64>>, dim: usize) -> f64 {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    rows.iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / (n - 1.0)
}

/// Per-epoch, per-modality GSC summary line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GscRow {
    pub epoch: usize,
    pub modality: usize,
    pub mean_rho: f64,
    pub mean_w: f64,
    pub weighted_var: f64,
    pub unweighted_var: f64,
}
