//! Split conformal prediction for classification.
//!
//! Nonconformity is `1 − p(y)`. The threshold `q̂` is the order statistic at
//! 1-based rank `⌈(n+1)(1−α)⌉` of the calibration scores, or `1.0` when that
//! rank exceeds `n`. Prediction sets hold every class whose score is at most
//! `q̂`, ordered by ascending score with ties broken by class index.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, CpscError, Result};

/// `1 − probs[label]`.
pub fn nonconformity(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or(CpscError::Index {
        index: label,
        len: probs.len(),
    })?;
    Ok((1.0 - p).clamp(0.0, 1.0))
}

/// 1-based rank of the conformal quantile among `n` calibration scores.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let exact = (n as f64 + 1.0) * (1.0 - alpha);
    // Absorbs representation error in decimal α such as 0.1.
    (exact - 1e-9).ceil().max(1.0) as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CpscError::Calibration(format!("alpha must lie in (0,1), got {alpha}")))
    }
}

/// Conformal threshold for the given calibration scores.
pub fn calibrate(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(CpscError::Calibration("no calibration scores".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CpscError::Calibration(format!("score {bad} outside [0,1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = quantile_rank(sorted.len(), alpha);
    Ok(if rank > sorted.len() { 1.0 } else { sorted[rank - 1] })
}

/// Calibrated conformal predictor. Immutable; refreshing builds a new one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalState {
    alpha: f64,
    cal_scores: Vec<f64>,
    q_hat: f64,
    /// Monotone counter set by whoever produced this state.
    pub version: u64,
}

impl ConformalState {
    pub fn calibrate(cal_scores: Vec<f64>, alpha: f64) -> Result<Self> {
        let q_hat = calibrate(&cal_scores, alpha)?;
        Ok(Self {
            alpha,
            cal_scores,
            q_hat,
            version: 0,
        })
    }

    /// A state whose threshold is forced, bypassing calibration.
    pub fn with_fixed_quantile(alpha: f64, q_hat: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(0.0..=1.0).contains(&q_hat) {
            return Err(CpscError::Calibration(format!("q_hat {q_hat} outside [0,1]")));
        }
        Ok(Self {
            alpha,
            cal_scores: Vec::new(),
            q_hat,
            version: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn q_hat(&self) -> f64 {
        self.q_hat
    }

    pub fn cal_scores(&self) -> &[f64] {
        &self.cal_scores
    }

    pub fn prediction_set(&self, probs: &[f64]) -> PredictionSet {
        prediction_set(probs, self.q_hat)
    }

    pub fn rank_reliability(&self, probs: &[f64], target: usize) -> f64 {
        rank_reliability(probs, self.q_hat, target)
    }
}

/// Classes admitted by the threshold, ascending by `(score, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub members: Vec<(usize, f64)>,
    pub q_used: f64,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.members.iter().any(|&(c, _)| c == class)
    }

    /// 1-based position of `class`, if present.
    pub fn rank_of(&self, class: usize) -> Option<usize> {
        self.members.iter().position(|&(c, _)| c == class).map(|i| i + 1)
    }
}

pub fn prediction_set(probs: &[f64], q_hat: f64) -> PredictionSet {
    let mut members: Vec<(usize, f64)> = probs
        .iter()
        .enumerate()
        .map(|(c, &p)| (c, 1.0 - p))
        .filter(|&(_, s)| s <= q_hat)
        .collect();
    members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    PredictionSet {
        members,
        q_used: q_hat,
    }
}

/// `1 − rank(target)/|C|`, or 0 when `target` is not in the set.
pub fn rank_reliability(probs: &[f64], q_hat: f64, target: usize) -> f64 {
    let set = prediction_set(probs, q_hat);
    match set.rank_of(target) {
        Some(rank) => 1.0 - rank as f64 / set.len() as f64,
        None => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageStats {
    pub coverage: f64,
    pub mean_set_size: f64,
}

pub fn coverage_audit(prob_rows: &[Vec<f64>], labels: &[usize], q_hat: f64) -> Result<CoverageStats> {
    if prob_rows.len() != labels.len() {
        return Err(dim_err(format!(
            "{} probability rows for {} labels",
            prob_rows.len(),
            labels.len()
        )));
    }
    if prob_rows.is_empty() {
        return Err(dim_err("coverage audit over zero samples"));
    }
    let mut covered = 0usize;
    let mut total_size = 0usize;
    for (probs, &y) in prob_rows.iter().zip(labels) {
        let set = prediction_set(probs, q_hat);
        total_size += set.len();
        if set.contains(y) {
            covered += 1;
        }
    }
    let n = labels.len() as f64;
    Ok(CoverageStats {
        coverage: covered as f64 / n,
        mean_set_size: total_size as f64 / n,
    })
}

/// One line of the coverage CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub epoch: usize,
    pub alpha: f64,
    pub q_hat: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
}
