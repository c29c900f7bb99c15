//! Warm-up, the self-calibration loop, the plain baseline loop, conformal
//! refresh, and inference.
//!
//! A run is `t0` warm-up epochs of fused cross-entropy on raw encoder
//! features, an initial conformal calibration on the held-out calibration
//! split, then `E − t0` epochs of either self-calibrated training or the
//! baseline. Both loops draw batches from the same seeded shuffle, so
//! with self-calibration switched off they follow identical trajectories.

pub mod config;
pub mod report;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{DataConfig, RefreshPath, RunConfig, TrainConfig, UpdateMode};
pub use report::{EpochReport, Phase};

use crate::conformal::{coverage_audit, nonconformity, ConformalState, CoverageRow};
use crate::error::{CpscError, Result};
use crate::gsc::{self, GscRow};
use crate::model::{CpscModel, HeadSeeds, ModelConfig, SampleCache};
use crate::numeric::{argmax, Optimizer, Parameterized};
use crate::rsc::{self, HistogramRow, ReliabilityHistogram};
use crate::synth::{AppliedAt, Dataset, LabeledSample};

const HISTOGRAM_BINS: usize = 10;

/// Which training loop follows warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cpsc,
    /// Mean of all components, fused CE plus unit-weight unimodal CE; no
    /// conformal scoring.
    Baseline,
}

/// Stratified random split into `(train, cal)`, preserving input order
/// inside each part.
pub fn split_data(
    samples: &[LabeledSample],
    calibration_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(calibration_fraction > 0.0 && calibration_fraction <= 0.5) {
        return Err(CpscError::Config(format!(
            "calibration_fraction must be in (0, 0.5], got {calibration_fraction}"
        )));
    }
    if (samples.len() as f64) < 2.0 / calibration_fraction {
        return Err(CpscError::Config(format!(
            "{} samples are too few for a calibration fraction of {calibration_fraction}",
            samples.len()
        )));
    }
    let classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.label].push(i);
    }

    // Largest-remainder allocation: exact total, each class within ±1.
    let total = (calibration_fraction * samples.len() as f64).round() as usize;
    let quotas: Vec<f64> = by_class
        .iter()
        .map(|idx| calibration_fraction * idx.len() as f64)
        .collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(classes * 2) {
        if remaining == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_cal = vec![false; samples.len()];
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(take[c]) {
            in_cal[i] = true;
        }
    }
    let (mut train, mut cal) = (Vec::new(), Vec::new());
    for (s, cal_flag) in samples.iter().zip(in_cal) {
        if cal_flag {
            cal.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, cal))
}

/// Train, calibration and test samples for one seed.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<LabeledSample>,
    pub cal: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Splits {
    pub fn build(data: &DataConfig, calibration_fraction: f64, seed: u64) -> Result<Self> {
        let spec = &data.generator;
        let mut pool = Dataset::generate_range(spec, 0, data.pool_size)?.samples;
        let mut test = Dataset::generate_range(spec, data.pool_size, data.test_size)?.samples;
        match spec.corruption.applied_at {
            AppliedAt::Train => Dataset::corrupt_samples(&mut pool, &spec.corruption, spec.seed, 0),
            AppliedAt::Test => Dataset::corrupt_samples(&mut test, &spec.corruption, spec.seed, 1),
        }
        let (train, cal) = split_data(&pool, calibration_fraction, seed)?;
        Ok(Self { train, cal, test })
    }
}

/// Nonconformity scores of `cal` under the raw fused path.
pub fn fused_scores(model: &CpscModel, cal: &[LabeledSample]) -> Result<Vec<f64>> {
    cal.iter()
        .map(|s| nonconformity(&model.predict_raw(&s.features)?.0, s.label))
        .collect()
}

/// Recalibrates on `cal` with the current parameters (raw fused path).
pub fn cp_refresh(model: &CpscModel, cal: &[LabeledSample], alpha: f64) -> Result<ConformalState> {
    if cal.is_empty() {
        return Err(CpscError::Calibration("empty calibration set".into()));
    }
    ConformalState::calibrate(fused_scores(model, cal)?, alpha)
}

/// Recalibration through the decomposition path, selecting components with
/// the previous predictor.
pub fn cp_refresh_rsc(
    model: &CpscModel,
    previous: &ConformalState,
    cal: &[LabeledSample],
    alpha: f64,
) -> Result<ConformalState> {
    if cal.is_empty() {
        return Err(CpscError::Calibration("empty calibration set".into()));
    }
    let k = model.config().top_k;
    let scores = cal
        .iter()
        .map(|s| {
            let cache = model.forward_reconstructed(&s.features, s.label, |m, comps| {
                Ok(rsc::select_components(model, Some(previous), m, comps, s.label, k)?.selected)
            })?;
            nonconformity(&cache.fused_probs, s.label)
        })
        .collect::<Result<Vec<_>>>()?;
    ConformalState::calibrate(scores, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Raw encoder features into the fusion head.
    Raw,
    /// Decompose and keep the components the conformal predictor ranks
    /// highest for the raw-path prediction.
    Reconstructed,
}

/// Fused and per-modality unimodal probabilities along the chosen path.
pub fn predict(
    model: &CpscModel,
    features: &[Vec<f64>],
    mode: InferMode,
    conformal: Option<&ConformalState>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let raw = model.predict_raw(features)?;
    match mode {
        InferMode::Raw => Ok(raw),
        InferMode::Reconstructed => {
            let cp = conformal.ok_or_else(|| {
                CpscError::Config("reconstructed inference needs a conformal predictor".into())
            })?;
            let target = argmax(&raw.0);
            let k = model.config().top_k;
            let cache = model.forward_reconstructed(features, target, |m, comps| {
                Ok(rsc::select_components(model, Some(cp), m, comps, target, k)?.selected)
            })?;
            let uni = cache.modalities.into_iter().map(|mc| mc.unimodal_probs).collect();
            Ok((cache.fused_probs, uni))
        }
    }
}

/// Fused probabilities and predicted class.
pub fn infer(
    model: &CpscModel,
    features: &[Vec<f64>],
    mode: InferMode,
    conformal: Option<&ConformalState>,
) -> Result<(Vec<f64>, usize)> {
    let (fused, _) = predict(model, features, mode, conformal)?;
    let c = argmax(&fused);
    Ok((fused, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub acc_fused: f64,
    pub acc_unimodal: Vec<f64>,
    pub fused_probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Raw-path accuracy of the fused and unimodal heads.
pub fn evaluate(model: &CpscModel, samples: &[LabeledSample]) -> Result<Evaluation> {
    evaluate_with(model, samples, InferMode::Raw, None)
}

pub fn evaluate_with(
    model: &CpscModel,
    samples: &[LabeledSample],
    mode: InferMode,
    conformal: Option<&ConformalState>,
) -> Result<Evaluation> {
    let m_count = model.modalities();
    let mut hits = 0usize;
    let mut uni_hits = vec![0usize; m_count];
    let mut fused_probs = Vec::with_capacity(samples.len());
    for s in samples {
        let (fused, uni) = predict(model, &s.features, mode, conformal)?;
        if argmax(&fused) == s.label {
            hits += 1;
        }
        for (h, p) in uni_hits.iter_mut().zip(&uni) {
            if argmax(p) == s.label {
                *h += 1;
            }
        }
        fused_probs.push(fused);
    }
    let n = samples.len().max(1) as f64;
    Ok(Evaluation {
        acc_fused: hits as f64 / n,
        acc_unimodal: uni_hits.iter().map(|&h| h as f64 / n).collect(),
        fused_probs,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

/// Mean modality reliability over labelled samples, computed exactly as in
/// training: components selected against the true label, reliability ranked
/// against the fused prediction.
pub fn held_out_reliability(model: &CpscModel, cp: &ConformalState, samples: &[LabeledSample]) -> Result<Vec<f64>> {
    let k = model.config().top_k;
    let mut sums = vec![0.0; model.modalities()];
    for s in samples {
        let cache = model.forward_reconstructed(&s.features, s.label, |m, comps| {
            Ok(rsc::select_components(model, Some(cp), m, comps, s.label, k)?.selected)
        })?;
        for (acc, r) in sums.iter_mut().zip(gsc::cached_modality_reliability(cp, &cache).rho) {
            *acc += r;
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(sums.into_iter().map(|x| x / n).collect())
}

/// Training-set aggregates of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss_total: f64,
    pub loss_fused: f64,
    pub loss_unimodal: Vec<f64>,
    pub loss_diversity: Vec<f64>,
    pub acc_fused: f64,
    pub acc_unimodal: Vec<f64>,
    pub mean_rho: Vec<f64>,
    pub mean_weight: Vec<f64>,
    /// `(weighted, unweighted)` gradient variance per modality.
    pub grad_variance: Vec<(f64, f64)>,
    pub histogram: Option<ReliabilityHistogram>,
    pub cp_version: u64,
}

struct Accumulator {
    n: usize,
    total: f64,
    fused: f64,
    uni: Vec<f64>,
    div: Vec<f64>,
    hits: usize,
    uni_hits: Vec<usize>,
    rho: Vec<f64>,
    weight: Vec<f64>,
}

impl Accumulator {
    fn new(m: usize) -> Self {
        Self {
            n: 0,
            total: 0.0,
            fused: 0.0,
            uni: vec![0.0; m],
            div: vec![0.0; m],
            hits: 0,
            uni_hits: vec![0; m],
            rho: vec![0.0; m],
            weight: vec![0.0; m],
        }
    }

    fn add_predictions(&mut self, cache: &SampleCache) {
        self.n += 1;
        if argmax(&cache.fused_probs) == cache.label {
            self.hits += 1;
        }
        for (h, mc) in self.uni_hits.iter_mut().zip(&cache.modalities) {
            if argmax(&mc.unimodal_probs) == cache.label {
                *h += 1;
            }
        }
    }

    fn finish(self, with_rho: bool, grad_variance: Vec<(f64, f64)>, histogram: Option<ReliabilityHistogram>, cp_version: u64) -> EpochStats {
        let n = self.n.max(1) as f64;
        let mean = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
        let nan = vec![f64::NAN; self.uni.len()];
        EpochStats {
            loss_total: self.total / n,
            loss_fused: self.fused / n,
            loss_unimodal: mean(self.uni),
            loss_diversity: mean(self.div),
            acc_fused: self.hits as f64 / n,
            acc_unimodal: self.uni_hits.iter().map(|&h| h as f64 / n).collect(),
            mean_rho: if with_rho { mean(self.rho) } else { nan.clone() },
            mean_weight: if with_rho { mean(self.weight) } else { nan },
            grad_variance,
            histogram,
            cp_version,
        }
    }
}

fn numeric_guard(epoch: usize, batch: usize, sample: usize, heads: &[(String, f64)]) -> Result<()> {
    if heads.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let dump = heads
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ");
    Err(CpscError::Numeric(format!(
        "non-finite loss at epoch {epoch}, batch {batch}, sample {sample}: {dump}"
    )))
}

/// Owns the model, optimizer, and conformal predictor for one run and is
/// their only mutator.
pub struct Trainer {
    cfg: TrainConfig,
    model: CpscModel,
    optimizer: Optimizer,
    conformal: Option<ConformalState>,
    rng: ChaCha8Rng,
    epoch: usize,
    refreshes: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = CpscModel::new(model_cfg, cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(17))?;
        Self::with_model(model, cfg)
    }

    pub fn with_model(model: CpscModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
        Ok(Self {
            cfg,
            model,
            optimizer,
            conformal: None,
            rng,
            epoch: 0,
            refreshes: 0,
        })
    }

    pub fn model(&self) -> &CpscModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn conformal(&self) -> Option<&ConformalState> {
        self.conformal.as_ref()
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn apply_update(&mut self) -> Result<()> {
        let mut params = self.model.params_mut();
        self.optimizer.step(&mut params)?;
        drop(params);
        self.model.zero_grads();
        Ok(())
    }

    /// Runs the per-sample closure over shuffled batches and handles the
    /// update schedule. `scale` is the per-sample seed multiplier.
    fn run_batches<F>(&mut self, train: &[LabeledSample], mut per_batch: F) -> Result<()>
    where
        F: FnMut(&mut CpscModel, &[&LabeledSample], f64, usize) -> Result<()>,
    {
        if train.is_empty() {
            return Err(CpscError::Config("empty training set".into()));
        }
        let batches = self.batches(train.len());
        let epoch_scale = match self.cfg.update_mode {
            UpdateMode::PerBatch => 1.0,
            UpdateMode::PerEpoch => 1.0 / batches.len() as f64,
        };
        self.model.zero_grads();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &train[i]).collect();
            let scale = epoch_scale / batch.len() as f64;
            per_batch(&mut self.model, &batch, scale, b)?;
            if self.cfg.update_mode == UpdateMode::PerBatch {
                self.apply_update()?;
            }
        }
        if self.cfg.update_mode == UpdateMode::PerEpoch {
            self.apply_update()?;
        }
        Ok(())
    }

    /// One epoch of fused cross-entropy on raw encoder features.
    pub fn warmup_epoch(&mut self, train: &[LabeledSample]) -> Result<EpochStats> {
        let m_count = self.model.modalities();
        let epoch = self.epoch + 1;
        let mut acc = Accumulator::new(m_count);
        self.run_batches(train, |model, batch, scale, b| {
            let caches = batch
                .iter()
                .map(|s| model.forward_raw(&s.features, s.label))
                .collect::<Result<Vec<_>>>()?;
            for (i, cache) in caches.iter().enumerate() {
                let l = cache.fused_loss();
                numeric_guard(epoch, b, i, &[("fused".into(), l)])?;
                acc.total += l;
                acc.fused += l;
                for m in 0..m_count {
                    acc.uni[m] += cache.unimodal_loss(m);
                }
                acc.add_predictions(cache);
                model.backward(cache, &HeadSeeds::fused_only(m_count, scale))?;
            }
            Ok(())
        })?;
        self.epoch = epoch;
        Ok(acc.finish(false, Vec::new(), None, 0))
    }

    /// Warm-up epochs followed by the initial calibration.
    pub fn warmup(&mut self, train: &[LabeledSample], cal: &[LabeledSample]) -> Result<Vec<EpochStats>> {
        let stats = (0..self.cfg.warmup_epochs)
            .map(|_| self.warmup_epoch(train))
            .collect::<Result<Vec<_>>>()?;
        self.install(cp_refresh(&self.model, cal, self.cfg.alpha)?);
        Ok(stats)
    }

    fn install(&mut self, mut state: ConformalState) {
        self.refreshes += 1;
        state.version = self.refreshes;
        self.conformal = Some(state);
    }

    /// Replaces the conformal predictor using the configured scoring path.
    pub fn refresh(&mut self, cal: &[LabeledSample]) -> Result<()> {
        let state = match (self.cfg.refresh_path, &self.conformal) {
            (RefreshPath::Rsc, Some(prev)) => cp_refresh_rsc(&self.model, prev, cal, self.cfg.alpha)?,
            _ => cp_refresh(&self.model, cal, self.cfg.alpha)?,
        };
        self.install(state);
        Ok(())
    }

    /// One self-calibration epoch.
    pub fn train_epoch(&mut self, train: &[LabeledSample]) -> Result<EpochStats> {
        let cp = self
            .conformal
            .clone()
            .ok_or_else(|| CpscError::Calibration("self-calibration needs a calibrated predictor".into()))?;
        let m_count = self.model.modalities();
        let k = self.model.config().top_k;
        let gsc_cfg = self.cfg.gsc;
        let (lambda1, lambda2) = (self.cfg.lambda1, self.cfg.lambda2);
        let diversity_on = lambda1 != 0.0 || lambda2 != 0.0;
        let epoch = self.epoch + 1;
        let mut acc = Accumulator::new(m_count);
        let mut histogram = ReliabilityHistogram::new(m_count, HISTOGRAM_BINS);
        let mut grad_samples: Vec<Vec<Vec<f64>>> = vec![Vec::new(); m_count];
        let mut grad_weights: Vec<Vec<f64>> = vec![Vec::new(); m_count];

        self.run_batches(train, |model, batch, scale, b| {
            // RSC: select components against the ground truth.
            let caches = batch
                .iter()
                .map(|s| {
                    let frozen: &CpscModel = model;
                    frozen.forward_reconstructed(&s.features, s.label, |m, comps| {
                        Ok(rsc::select_components(frozen, Some(&cp), m, comps, s.label, k)?.selected)
                    })
                })
                .collect::<Result<Vec<_>>>()?;

            for (i, cache) in caches.iter().enumerate() {
                // GSC: reliability against the fused prediction.
                let rel = gsc::cached_modality_reliability(&cp, cache);
                let weights: Vec<f64> = rel.rho.iter().map(|&r| gsc::weight(r, &gsc_cfg)).collect();

                let fused = cache.fused_loss();
                let mut heads = vec![("fused".to_string(), fused)];
                let mut total = fused;
                for m in 0..m_count {
                    let uni = cache.unimodal_loss(m);
                    let div = if diversity_on {
                        let mc = &cache.modalities[m];
                        let comps = &mc.decomp.as_ref().expect("reconstructed route").components;
                        rsc::diversity_loss(&mc.encoder.feature, comps, lambda1, lambda2)?.total
                    } else {
                        0.0
                    };
                    heads.push((format!("unimodal{m}"), uni));
                    heads.push((format!("diversity{m}"), div));
                    total += weights[m] * uni + div;
                    acc.uni[m] += uni;
                    acc.div[m] += div;
                    acc.rho[m] += rel.rho[m];
                    acc.weight[m] += weights[m];
                    histogram.record(m, rel.rho[m]);

                    // Per-sample unimodal-head gradient for the variance diagnostic.
                    let mc = &cache.modalities[m];
                    let mut g = mc.unimodal_probs.clone();
                    g[cache.label] -= 1.0;
                    let mut flat: Vec<f64> = g
                        .iter()
                        .flat_map(|gk| mc.head_input.iter().map(move |x| gk * x))
                        .collect();
                    flat.extend_from_slice(&g);
                    grad_samples[m].push(flat);
                    grad_weights[m].push(weights[m]);
                }
                numeric_guard(epoch, b, i, &heads)?;
                acc.total += total;
                acc.fused += fused;
                acc.add_predictions(cache);

                let seeds = HeadSeeds {
                    fused: scale,
                    unimodal: weights.iter().map(|w| w * scale).collect(),
                    diversity: vec![if diversity_on { scale } else { 0.0 }; m_count],
                    lambda1,
                    lambda2,
                };
                model.backward(cache, &seeds)?;
            }
            Ok(())
        })?;

        let grad_variance = grad_samples
            .iter()
            .zip(&grad_weights)
            .map(|(s, w)| gsc::variance_diagnostic(s, w))
            .collect::<Result<Vec<_>>>()?;
        self.epoch = epoch;
        Ok(acc.finish(true, grad_variance, Some(histogram), cp.version))
    }

    /// One baseline epoch: mean of every component, fused CE plus unit-weight
    /// unimodal CE, no conformal scoring.
    pub fn baseline_epoch(&mut self, train: &[LabeledSample]) -> Result<EpochStats> {
        let m_count = self.model.modalities();
        let n = self.model.config().components;
        let all: Vec<usize> = (0..n).collect();
        let epoch = self.epoch + 1;
        let mut acc = Accumulator::new(m_count);
        self.run_batches(train, |model, batch, scale, b| {
            let caches = batch
                .iter()
                .map(|s| model.forward_reconstructed(&s.features, s.label, |_, _| Ok(all.clone())))
                .collect::<Result<Vec<_>>>()?;
            for (i, cache) in caches.iter().enumerate() {
                let fused = cache.fused_loss();
                let mut heads = vec![("fused".to_string(), fused)];
                let mut total = fused;
                for m in 0..m_count {
                    let uni = cache.unimodal_loss(m);
                    heads.push((format!("unimodal{m}"), uni));
                    total += uni;
                    acc.uni[m] += uni;
                }
                numeric_guard(epoch, b, i, &heads)?;
                acc.total += total;
                acc.fused += fused;
                acc.add_predictions(cache);
                let seeds = HeadSeeds {
                    fused: scale,
                    unimodal: vec![scale; m_count],
                    ..HeadSeeds::zeros(m_count)
                };
                model.backward(cache, &seeds)?;
            }
            Ok(())
        })?;
        self.epoch = epoch;
        Ok(acc.finish(false, Vec::new(), None, 0))
    }
}

/// Complete output of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub reports: Vec<EpochReport>,
    pub coverage: Vec<CoverageRow>,
    pub gsc: Vec<GscRow>,
    pub histogram: Vec<HistogramRow>,
    pub summary: RunSummary,
    /// Parameters at the end of warm-up.
    pub warmup_model: CpscModel,
    pub model: CpscModel,
    pub conformal: ConformalState,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub test_acc_fused: f64,
    pub test_acc_unimodal: Vec<f64>,
    pub q_hat: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
    /// Held-out modality reliability right after warm-up and after training.
    pub rho_after_warmup: Vec<f64>,
    pub rho_final: Vec<f64>,
    pub config: RunConfig,
}

fn report_from(
    epoch: usize,
    phase: Phase,
    stats: &EpochStats,
    eval: &Evaluation,
    cp: Option<&ConformalState>,
    alpha: f64,
) -> Result<(EpochReport, CoverageRow)> {
    let (q_hat, coverage, mean_set_size) = match cp {
        Some(cp) => {
            let c = coverage_audit(&eval.fused_probs, &eval.labels, cp.q_hat())?;
            (cp.q_hat(), c.coverage, c.mean_set_size)
        }
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    let report = EpochReport {
        epoch,
        phase,
        loss_total: stats.loss_total,
        loss_fused: stats.loss_fused,
        loss_unimodal: stats.loss_unimodal.clone(),
        loss_diversity: stats.loss_diversity.clone(),
        train_acc_fused: stats.acc_fused,
        train_acc_unimodal: stats.acc_unimodal.clone(),
        test_acc_fused: eval.acc_fused,
        test_acc_unimodal: eval.acc_unimodal.clone(),
        q_hat,
        coverage,
        mean_set_size,
        mean_rho: stats.mean_rho.clone(),
        cp_version: stats.cp_version,
    };
    let row = CoverageRow {
        epoch,
        alpha,
        q_hat,
        coverage,
        mean_set_size,
    };
    Ok((report, row))
}

/// Full run: warm-up, calibration, then `E − t0` epochs of `method`.
///
/// For the baseline the predictor is recalibrated every epoch purely for
/// reporting; it never influences training.
pub fn run(cfg: &RunConfig, method: Method, splits: &Splits) -> Result<RunResult> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut trainer = Trainer::new(cfg.model.clone(), tc.clone())?;
    let mut reports = Vec::new();
    let mut coverage = Vec::new();
    let mut gsc_rows = Vec::new();
    let mut histogram = Vec::new();

    for _ in 0..tc.warmup_epochs {
        let stats = trainer.warmup_epoch(&splits.train)?;
        let eval = evaluate(trainer.model(), &splits.test)?;
        let (r, c) = report_from(trainer.epoch(), Phase::Warmup, &stats, &eval, None, tc.alpha)?;
        reports.push(r);
        coverage.push(c);
    }
    trainer.install(cp_refresh(trainer.model(), &splits.cal, tc.alpha)?);
    let warmup_model = trainer.model().clone();
    let rho_after_warmup = held_out_reliability(
        trainer.model(),
        trainer.conformal().expect("installed"),
        &splits.test,
    )?;

    for step in 1..=(tc.total_epochs - tc.warmup_epochs) {
        let (stats, phase) = match method {
            Method::Cpsc => (trainer.train_epoch(&splits.train)?, Phase::Cpsc),
            Method::Baseline => (trainer.baseline_epoch(&splits.train)?, Phase::Baseline),
        };
        let refresh_due = match method {
            Method::Cpsc => step % tc.cp_update_interval == 0,
            Method::Baseline => true,
        };
        if refresh_due {
            trainer.refresh(&splits.cal)?;
        }
        let epoch = trainer.epoch();
        let eval = evaluate(trainer.model(), &splits.test)?;
        let (r, c) = report_from(epoch, phase, &stats, &eval, trainer.conformal(), tc.alpha)?;
        reports.push(r);
        coverage.push(c);
        for (m, &(wv, uv)) in stats.grad_variance.iter().enumerate() {
            gsc_rows.push(GscRow {
                epoch,
                modality: m,
                mean_rho: stats.mean_rho[m],
                mean_w: stats.mean_weight[m],
                weighted_var: wv,
                unweighted_var: uv,
            });
        }
        if let Some(h) = &stats.histogram {
            histogram.extend(h.rows(epoch));
        }
    }

    let cp = trainer.conformal().expect("calibrated").clone();
    let eval = evaluate(trainer.model(), &splits.test)?;
    let cov = coverage_audit(&eval.fused_probs, &eval.labels, cp.q_hat())?;
    let rho_final = held_out_reliability(trainer.model(), &cp, &splits.test)?;
    let summary = RunSummary {
        method,
        seed: tc.seed,
        test_acc_fused: eval.acc_fused,
        test_acc_unimodal: eval.acc_unimodal,
        q_hat: cp.q_hat(),
        coverage: cov.coverage,
        mean_set_size: cov.mean_set_size,
        rho_after_warmup,
        rho_final,
        config: cfg.clone(),
    };
    Ok(RunResult {
        method,
        reports,
        coverage,
        gsc: gsc_rows,
        histogram,
        summary,
        warmup_model,
        model: trainer.model,
        conformal: cp,
    })
}
