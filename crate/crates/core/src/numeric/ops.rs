//! Elementwise activations, softmax, and the two probability losses.
//!
//! Every log is taken of a value clamped below by [`EPS_KL`], so losses stay
//! finite even when a probability underflows to zero.

use crate::error::{dim_err, CpscError, Result};

/// Lower clamp for probabilities inside logarithms.
pub const EPS_KL: f64 = 1e-12;

pub fn relu(v: &[f64]) -> Vec<f64> {
    // Written as a comparison so NaN propagates instead of becoming 0.
    v.iter().map(|&x| if x < 0.0 { 0.0 } else { x }).collect()
}

/// Gradient mask of ReLU evaluated at the pre-activation `z` (subgradient 0 at 0).
pub fn relu_backward(z: &[f64], grad_out: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(grad_out)
        .map(|(&zi, &g)| if zi > 0.0 { g } else { 0.0 })
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(dim_err("softmax of empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(dim_err("log_softmax of empty vector"));
    }
    let lse = log_sum_exp(v);
    Ok(v.iter().map(|&x| x - lse).collect())
}

/// Pulls a gradient w.r.t. softmax outputs `probs` back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Lower clamp that, unlike `f64::max`, lets NaN through.
fn floor_at(x: f64, lo: f64) -> f64 {
    if x < lo {
        lo
    } else {
        x
    }
}

/// `KL(p ‖ q) = Σ pᵢ ln(pᵢ / qᵢ)` with both logs clamped at [`EPS_KL`].
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(dim_err(format!("kl_div lengths {} vs {}", p.len(), q.len())));
    }
    let kl = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (floor_at(pi, EPS_KL).ln() - floor_at(qi, EPS_KL).ln()))
        .sum::<f64>();
    Ok(if kl < 0.0 { 0.0 } else { kl })
}

/// KL divergence between `softmax(a)` and `softmax(b)` together with its
/// gradients w.r.t. the logits `a` and `b`.
pub fn kl_softmax(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(dim_err(format!("kl_softmax lengths {} vs {}", a.len(), b.len())));
    }
    let ln_eps = EPS_KL.ln();
    let lp: Vec<f64> = log_softmax(a)?.into_iter().map(|x| floor_at(x, ln_eps)).collect();
    let lq_raw = log_softmax(b)?;
    let lq: Vec<f64> = lq_raw.iter().map(|&x| floor_at(x, ln_eps)).collect();
    let p = softmax(a)?;
    let q = softmax(b)?;

    let ratio: Vec<f64> = lp.iter().zip(&lq).map(|(x, y)| x - y).collect();
    let kl: f64 = p.iter().zip(&ratio).map(|(pi, r)| pi * r).sum();

    let grad_a: Vec<f64> = p.iter().zip(&ratio).map(|(pi, r)| pi * (r - kl)).collect();

    // Clamped entries of log q are constant in b.
    let live_mass: f64 = p
        .iter()
        .zip(&lq_raw)
        .filter(|(_, &l)| l > ln_eps)
        .map(|(pi, _)| pi)
        .sum();
    let grad_b: Vec<f64> = p
        .iter()
        .zip(&q)
        .zip(&lq_raw)
        .map(|((&pj, &qj), &l)| {
            let own = if l > ln_eps { pj } else { 0.0 };
            qj * live_mass - own
        })
        .collect();
    Ok((kl, grad_a, grad_b))
}

/// `−ln(probs[label])` with the probability clamped at [`EPS_KL`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or(CpscError::Index {
        index: label,
        len: probs.len(),
    })?;
    Ok(-floor_at(p, EPS_KL).ln())
}

/// Gradient of `cross_entropy(softmax(z), label)` w.r.t. the logits `z`.
pub fn cross_entropy_logit_grad(probs: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= probs.len() {
        return Err(CpscError::Index {
            index: label,
            len: probs.len(),
        });
    }
    if probs[label] < EPS_KL {
        return Ok(vec![0.0; probs.len()]);
    }
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    Ok(g)
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
