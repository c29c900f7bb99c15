use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use cpsc::conformal::ConformalState;
use cpsc::diagnostics::{coverage_resampling, gradient_pair};
use cpsc::io::{load_checkpoint, save_checkpoint};
use cpsc::model::{CpscModel, ModelConfig};
use cpsc::numeric::OptimizerKind;
use cpsc::synth::{AppliedAt, CorruptionKind, CorruptionSpec, Dataset, GenSpec};
use cpsc::trainer::report::{write_epoch_csv, write_rows};
use cpsc::trainer::{evaluate, run, Method, RunConfig, RunResult, Splits, Trainer};
use cpsc::GscConfig;

use crate::output::StagedDir;
use crate::{Ablation, Axis, Common, GradcheckFailed, MethodArg, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            Ok(RunConfig::from_toml(&text)?)
        }
    }
}

/// `0..4` and `0..=4` are inclusive; items are comma separated.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = item.split_once("..") {
            let b = b.trim_start_matches('=');
            let (a, b): (u64, u64) = (
                a.parse().map_err(|_| usage(format!("bad seed range `{item}`")))?,
                b.parse().map_err(|_| usage(format!("bad seed range `{item}`")))?,
            );
            if a > b {
                return Err(usage(format!("empty seed range `{item}`")));
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(item.parse().map_err(|_| usage(format!("bad seed `{item}`")))?);
        }
    }
    if seeds.is_empty() {
        return Err(usage("no seeds given"));
    }
    Ok(seeds)
}

fn resolve_seeds(common: &Common) -> Result<Vec<u64>> {
    match std::env::var("CPSC_SEED") {
        Ok(v) if !v.trim().is_empty() => {
            let seed = v.trim().parse().map_err(|_| usage(format!("CPSC_SEED is not a seed: `{v}`")))?;
            Ok(vec![seed])
        }
        _ => parse_seeds(&common.seeds),
    }
}

pub fn apply_ablations(cfg: &mut RunConfig, ablations: &[Ablation]) {
    for a in ablations {
        match a {
            Ablation::Rsc => {
                cfg.model.top_k = cfg.model.components;
                cfg.train.lambda1 = 0.0;
                cfg.train.lambda2 = 0.0;
            }
            Ablation::Gsc => cfg.train.gsc = GscConfig { a: 0.0, b: 1.0 },
            Ablation::Warmup => cfg.train.warmup_epochs = 0,
            Ablation::Div => {
                cfg.train.lambda1 = 0.0;
                cfg.train.lambda2 = 0.0;
            }
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn write_run(dir: &Path, result: &RunResult) -> Result<()> {
    write_epoch_csv(File::create(dir.join("metrics.csv"))?, &result.reports)?;
    write_rows(File::create(dir.join("coverage.csv"))?, &result.coverage)?;
    write_rows(File::create(dir.join("gsc.csv"))?, &result.gsc)?;
    write_rows(File::create(dir.join("reliability_hist.csv"))?, &result.histogram)?;
    write_json(&dir.join("summary.json"), &result.summary)?;
    save_checkpoint(&dir.join("warmup.ckpt"), &result.warmup_model)?;
    save_checkpoint(&dir.join("final.ckpt"), &result.model)?;
    Ok(())
}

pub fn train(common: &Common, out: &Path, ablations: &[Ablation], method: MethodArg) -> Result<()> {
    let mut base = load_config(common.config.as_deref())?;
    apply_ablations(&mut base, ablations);
    base.validate()?;
    let seeds = resolve_seeds(common)?;
    let method = match method {
        MethodArg::Cpsc => Method::Cpsc,
        MethodArg::Baseline => Method::Baseline,
    };
    let staged = StagedDir::create(out)?;
    fs::write(staged.path().join("config.toml"), base.to_toml())?;
    for &seed in &seeds {
        let cfg = base.clone().with_seed(seed);
        let splits = Splits::build(&cfg.data, cfg.train.calibration_fraction, seed)?;
        let result = run(&cfg, method, &splits).with_context(|| format!("seed {seed}"))?;
        write_run(&staged.subdir(&format!("seed-{seed}"))?, &result)?;
        let s = &result.summary;
        println!(
            "seed {seed}: fused acc {:.4}, unimodal {:?}, coverage {:.4}, set size {:.3}",
            s.test_acc_fused, s.test_acc_unimodal, s.coverage, s.mean_set_size
        );
    }
    let dir = staged.commit()?;
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct AuditRow {
    seed: u64,
    round: usize,
    alpha: f64,
    q_hat: f64,
    coverage: f64,
    mean_set_size: f64,
}

pub fn audit(
    common: &Common,
    out: &Path,
    checkpoint: Option<&Path>,
    alpha: Option<f64>,
    rounds: usize,
    cal_size: usize,
    test_size: usize,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let alpha = alpha.unwrap_or(cfg.train.alpha);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(usage(format!("alpha must be in (0,1), got {alpha}")));
    }
    if rounds == 0 || cal_size == 0 || test_size == 0 {
        return Err(usage("rounds, cal-size and test-size must be positive"));
    }
    let frozen = match checkpoint {
        Some(p) if !p.exists() => return Err(usage(format!("checkpoint {} does not exist", p.display()))),
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    if let Some(model) = &frozen {
        if model.config().input_dims != cfg.data.generator.input_dims() {
            return Err(usage("checkpoint input widths do not match the configured generator"));
        }
    }
    let seeds = resolve_seeds(common)?;
    let staged = StagedDir::create(out)?;
    let mut rows = Vec::new();
    for &seed in &seeds {
        let cfg = cfg.clone().with_seed(seed);
        let model = match &frozen {
            Some(m) => m.clone(),
            None => {
                let splits = Splits::build(&cfg.data, cfg.train.calibration_fraction, seed)?;
                let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone())?;
                trainer.warmup(&splits.train, &splits.cal)?;
                trainer.model().clone()
            }
        };
        // Fresh draws beyond the ranges used for training and testing.
        let offset = cfg.data.pool_size + cfg.data.test_size;
        let draws = coverage_resampling(&model, &cfg.data.generator, alpha, cal_size, test_size, rounds, offset)?;
        let bound = 1.0 - alpha - 3.0 * (alpha * (1.0 - alpha) / test_size as f64).sqrt();
        let hits = draws.iter().filter(|(_, c)| c.coverage >= bound).count();
        println!("seed {seed}: {hits}/{rounds} rounds with coverage ≥ {bound:.4}");
        for (round, (state, stats)) in draws.iter().enumerate() {
            rows.push(AuditRow {
                seed,
                round,
                alpha,
                q_hat: state.q_hat(),
                coverage: stats.coverage,
                mean_set_size: stats.mean_set_size,
            });
        }
    }
    write_rows(File::create(staged.path().join("audit.csv"))?, &rows)?;
    let dir = staged.commit()?;
    println!("wrote {}", dir.display());
    Ok(())
}

/// Caps the architecture at the sizes where finite differences stay cheap
/// and well conditioned.
fn gradcheck_config(cfg: &RunConfig) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.input_dims = m.input_dims.iter().map(|&d| d.min(6)).collect();
    m.hidden_dim = m.hidden_dim.min(8);
    m.feature_dim = m.feature_dim.min(8);
    m.components = m.components.min(4);
    m.top_k = m.top_k.min(m.components);
    m
}

fn gradcheck_batch(model: &ModelConfig, classes: usize, size: usize, seed: u64) -> Result<Vec<cpsc::LabeledSample>> {
    let strengths = vec![1.0; model.input_dims.len()];
    let mut spec = GenSpec::imbalanced(&strengths, classes, size, seed);
    for (s, &d) in spec.modalities.iter_mut().zip(&model.input_dims) {
        s.dim = d;
    }
    Ok(Dataset::generate(&spec)?.samples)
}

pub fn gradcheck(common: &Common, batch: usize, tolerance: f64, corrupt_backward: bool) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    if batch == 0 {
        return Err(usage("batch must be positive"));
    }
    let model_cfg = gradcheck_config(&cfg);
    let mut failures = 0;
    for seed in resolve_seeds(common)? {
        let samples = gradcheck_batch(&model_cfg, model_cfg.classes, batch, seed)?;
        let mut model = CpscModel::new(model_cfg.clone(), seed)?;
        let cp = ConformalState::with_fixed_quantile(cfg.train.alpha, 0.8)?;
        let mut pair = gradient_pair(
            &mut model,
            &cp,
            &samples,
            &cfg.train.gsc,
            cfg.train.lambda1,
            cfg.train.lambda2,
            1e-5,
        )?;
        if corrupt_backward {
            for g in pair.analytic.iter_mut().flatten() {
                *g = *g * 1.05 + 1e-3;
            }
        }
        for b in pair.compare() {
            let ok = b.rel_error <= tolerance;
            if !ok {
                failures += 1;
            }
            println!(
                "seed {seed} {:<18} rel err {:.3e} |grad| {:.3e} {}",
                b.block,
                b.rel_error,
                b.analytic_norm,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    if failures > 0 {
        return Err(GradcheckFailed(failures).into());
    }
    println!("all blocks within {tolerance:e}");
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    axis: &'static str,
    value: String,
    method: &'static str,
    seeds: usize,
    fused_mean: f64,
    fused_std: f64,
    unimodal_mean: String,
    unimodal_std: String,
    coverage_mean: f64,
    set_size_mean: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-seed measurements of one (value, method) cell.
#[derive(Default)]
struct Cell {
    fused: Vec<f64>,
    unimodal: Vec<Vec<f64>>,
    coverage: Vec<f64>,
    set_size: Vec<f64>,
}

impl Cell {
    fn push(&mut self, fused: f64, unimodal: Vec<f64>, coverage: f64, set_size: f64) {
        self.fused.push(fused);
        self.unimodal.push(unimodal);
        self.coverage.push(coverage);
        self.set_size.push(set_size);
    }

    fn row(&self, axis: &'static str, value: &str, method: Method) -> SweepRow {
        let (fused_mean, fused_std) = mean_std(&self.fused);
        let m = self.unimodal.first().map_or(0, Vec::len);
        let per: Vec<(f64, f64)> = (0..m)
            .map(|j| mean_std(&self.unimodal.iter().map(|u| u[j]).collect::<Vec<_>>()))
            .collect();
        let join = |f: fn(&(f64, f64)) -> f64| per.iter().map(|p| format!("{:.6}", f(p))).collect::<Vec<_>>().join(";");
        SweepRow {
            axis,
            value: value.to_string(),
            method: match method {
                Method::Cpsc => "cpsc",
                Method::Baseline => "baseline",
            },
            seeds: self.fused.len(),
            fused_mean,
            fused_std,
            unimodal_mean: join(|p| p.0),
            unimodal_std: join(|p| p.1),
            coverage_mean: mean_std(&self.coverage).0,
            set_size_mean: mean_std(&self.set_size).0,
        }
    }
}

fn parse_noise(value: &str) -> Result<(CorruptionKind, f64)> {
    let (kind, eps) = match value.split_once(':') {
        Some((k, e)) => (k, e),
        None => ("gaussian", value),
    };
    let kind = match kind {
        "gaussian" => CorruptionKind::Gaussian,
        "salt_pepper" | "saltpepper" => CorruptionKind::SaltPepper,
        other => return Err(usage(format!("unknown noise kind `{other}`"))),
    };
    let eps: f64 = eps.parse().map_err(|_| usage(format!("bad noise strength in `{value}`")))?;
    if !(eps >= 0.0) {
        return Err(usage(format!("noise strength must be non-negative in `{value}`")));
    }
    Ok((kind, eps))
}

/// Config for one axis value (the noise axis leaves training untouched).
fn configure(base: &RunConfig, axis: Axis, value: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        Axis::Optimizer => {
            let (name, lr) = match value.split_once(':') {
                Some((n, lr)) => (n, lr.parse().map_err(|_| usage(format!("bad learning rate in `{value}`")))?),
                None => (value, base.train.optimizer.lr()),
            };
            cfg.train.optimizer = OptimizerKind::from_name(name, lr).map_err(|e| usage(e.to_string()))?;
        }
        Axis::CpInterval => {
            cfg.train.cp_update_interval = value.parse().map_err(|_| usage(format!("bad interval `{value}`")))?;
        }
        Axis::Alpha => {
            cfg.train.alpha = value.parse().map_err(|_| usage(format!("bad alpha `{value}`")))?;
        }
        Axis::Noise => {
            parse_noise(value)?;
        }
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn sweep(common: &Common, out: &Path, axis: Axis, values: &[String]) -> Result<()> {
    let base = load_config(common.config.as_deref())?;
    let seeds = resolve_seeds(common)?;
    let axis_name = match axis {
        Axis::Optimizer => "optimizer",
        Axis::CpInterval => "cp_interval",
        Axis::Alpha => "alpha",
        Axis::Noise => "noise",
    };
    // Validate every value before any training starts.
    let configs = values
        .iter()
        .map(|v| configure(&base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let methods = [Method::Baseline, Method::Cpsc];
    let mut cells: Vec<[Cell; 2]> = values.iter().map(|_| Default::default()).collect();

    for &seed in &seeds {
        if axis == Axis::Noise {
            // Train once per method on clean data, then evaluate each
            // corruption of modality 0 at test time.
            let cfg = base.clone().with_seed(seed);
            let splits = Splits::build(&cfg.data, cfg.train.calibration_fraction, seed)?;
            for (mi, &method) in methods.iter().enumerate() {
                let result = run(&cfg, method, &splits).with_context(|| format!("seed {seed}"))?;
                for (vi, value) in values.iter().enumerate() {
                    let (kind, eps) = parse_noise(value)?;
                    let mut test = splits.test.clone();
                    let spec = CorruptionSpec {
                        kind,
                        strength: eps,
                        modalities: vec![0],
                        applied_at: AppliedAt::Test,
                    };
                    Dataset::corrupt_samples(&mut test, &spec, seed, 9);
                    let eval = evaluate(&result.model, &test)?;
                    let cov = cpsc::conformal::coverage_audit(&eval.fused_probs, &eval.labels, result.conformal.q_hat())?;
                    cells[vi][mi].push(eval.acc_fused, eval.acc_unimodal, cov.coverage, cov.mean_set_size);
                }
            }
        } else {
            for (vi, cfg) in configs.iter().enumerate() {
                let cfg = cfg.clone().with_seed(seed);
                let splits = Splits::build(&cfg.data, cfg.train.calibration_fraction, seed)?;
                for (mi, &method) in methods.iter().enumerate() {
                    let r = run(&cfg, method, &splits).with_context(|| format!("seed {seed}, {axis_name}={}", values[vi]))?;
                    let s = r.summary;
                    cells[vi][mi].push(s.test_acc_fused, s.test_acc_unimodal, s.coverage, s.mean_set_size);
                }
            }
        }
    }

    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&cells)
        .flat_map(|(v, pair)| methods.iter().zip(pair).map(move |(&m, c)| c.row(axis_name, v, m)))
        .collect();
    for r in &rows {
        println!(
            "{}={:<12} {:<8} fused {:.4} ± {:.4}  unimodal [{}]",
            r.axis, r.value, r.method, r.fused_mean, r.fused_std, r.unimodal_mean
        );
    }
    let staged = StagedDir::create(out)?;
    write_rows(File::create(staged.path().join("sweep.csv"))?, &rows)?;
    fs::write(staged.path().join("config.toml"), base.to_toml())?;
    let dir = staged.commit()?;
    println!("wrote {}", dir.display());
    Ok(())
}
