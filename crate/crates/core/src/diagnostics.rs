//! Gradient checks and coverage audits shared by the test suite and the
//! command-line driver.

use serde::Serialize;

use crate::conformal::{coverage_audit, ConformalState, CoverageStats};
use crate::error::{CpscError, Result};
use crate::gsc::{self, GscConfig};
use crate::model::{CpscModel, HeadSeeds, SampleCache};
use crate::numeric::{finite_diff_grad, relative_error, Parameterized};
use crate::rsc;
use crate::synth::{Dataset, GenSpec, LabeledSample};
use crate::trainer::fused_scores;

/// Below this combined norm a block counts as zero on both sides.
const GRAD_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub block: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Analytic and central-difference gradients of the full self-calibration
/// objective over `batch`, per parameter block.
#[derive(Debug, Clone)]
pub struct GradientPair {
    pub names: Vec<String>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradientPair {
    pub fn compare(&self) -> Vec<BlockCheck> {
        self.names
            .iter()
            .zip(self.analytic.iter().zip(&self.numeric))
            .map(|(name, (a, n))| BlockCheck {
                block: name.clone(),
                rel_error: relative_error(a, n, GRAD_NORM_FLOOR),
                analytic_norm: a.iter().map(|x| x * x).sum::<f64>().sqrt(),
            })
            .collect()
    }
}

/// Component selections and GSC weights are computed once from the current
/// parameters and then frozen, so the objective is smooth in the parameters
/// (away from ReLU kinks).
pub fn gradient_pair(
    model: &mut CpscModel,
    cp: &ConformalState,
    batch: &[LabeledSample],
    gsc_cfg: &GscConfig,
    lambda1: f64,
    lambda2: f64,
    step: f64,
) -> Result<GradientPair> {
    if batch.is_empty() {
        return Err(CpscError::Config("gradient check needs a non-empty batch".into()));
    }
    let m_count = model.modalities();
    let k = model.config().top_k;
    let scale = 1.0 / batch.len() as f64;

    let mut selections = Vec::with_capacity(batch.len());
    let mut seeds = Vec::with_capacity(batch.len());
    let mut caches: Vec<SampleCache> = Vec::with_capacity(batch.len());
    for s in batch {
        let mut chosen = vec![Vec::new(); m_count];
        let frozen: &CpscModel = model;
        let cache = frozen.forward_reconstructed(&s.features, s.label, |m, comps| {
            let sel = rsc::select_components(frozen, Some(cp), m, comps, s.label, k)?.selected;
            chosen[m] = sel.clone();
            Ok(sel)
        })?;
        let rho = gsc::cached_modality_reliability(cp, &cache).rho;
        seeds.push(HeadSeeds {
            fused: scale,
            unimodal: rho.iter().map(|&r| gsc::weight(r, gsc_cfg) * scale).collect(),
            diversity: vec![scale; m_count],
            lambda1,
            lambda2,
        });
        selections.push(chosen);
        caches.push(cache);
    }

    model.zero_grads();
    for (cache, seed) in caches.iter().zip(&seeds) {
        model.backward(cache, seed)?;
    }
    let names = model.params().iter().map(|p| p.name.clone()).collect();
    let analytic = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
    model.zero_grads();

    let numeric = finite_diff_grad(
        model,
        |m| {
            let mut total = 0.0;
            for ((s, sel), seed) in batch.iter().zip(&selections).zip(&seeds) {
                let c = m.forward_reconstructed(&s.features, s.label, |j, _| Ok(sel[j].clone()))?;
                total += m.seeded_loss(&c, seed)?;
            }
            Ok(total)
        },
        step,
    )?
    .into_iter()
    .map(|t| t.data().to_vec())
    .collect();

    Ok(GradientPair {
        names,
        analytic,
        numeric,
    })
}

/// One coverage measurement per resampling round: a fresh calibration set
/// and a fresh test set are drawn from disjoint ranges of the generator
/// stream, starting at `offset`.
pub fn coverage_resampling(
    model: &CpscModel,
    spec: &GenSpec,
    alpha: f64,
    cal_size: usize,
    test_size: usize,
    rounds: usize,
    offset: usize,
) -> Result<Vec<(ConformalState, CoverageStats)>> {
    let per_round = cal_size + test_size;
    (0..rounds)
        .map(|r| {
            let start = offset + r * per_round;
            let cal = Dataset::generate_range(spec, start, cal_size)?.samples;
            let test = Dataset::generate_range(spec, start + cal_size, test_size)?.samples;
            let state = ConformalState::calibrate(fused_scores(model, &cal)?, alpha)?;
            let stats = coverage_on(model, &test, state.q_hat())?;
            Ok((state, stats))
        })
        .collect()
}

/// Raw-path coverage and mean set size of `samples` at threshold `q_hat`.
pub fn coverage_on(model: &CpscModel, samples: &[LabeledSample], q_hat: f64) -> Result<CoverageStats> {
    let probs = samples
        .iter()
        .map(|s| Ok(model.predict_raw(&s.features)?.0))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    coverage_audit(&probs, &labels, q_hat)
}
