use std::io::Write;

use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Cpsc,
    Baseline,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Cpsc => "cpsc",
            Phase::Baseline => "baseline",
        }
    }
}

/// Aggregates for one epoch. Vector fields hold one value per modality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean of the full objective that was differentiated.
    pub loss_total: f64,
    pub loss_fused: f64,
    pub loss_unimodal: Vec<f64>,
    pub loss_diversity: Vec<f64>,
    pub train_acc_fused: f64,
    pub train_acc_unimodal: Vec<f64>,
    pub test_acc_fused: f64,
    pub test_acc_unimodal: Vec<f64>,
    pub q_hat: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
    /// Mean training-time modality reliability; NaN outside self-calibration.
    pub mean_rho: Vec<f64>,
    /// Version of the conformal predictor that scored this epoch.
    pub cp_version: u64,
}

impl EpochReport {
    pub fn csv_header(modalities: usize) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "phase", "loss_total", "loss_fused"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let per = |h: &mut Vec<String>, stem: &str| {
            for m in 0..modalities {
                h.push(format!("{stem}_m{m}"));
            }
        };
        per(&mut h, "loss_unimodal");
        per(&mut h, "loss_diversity");
        h.push("train_acc_fused".into());
        per(&mut h, "train_acc_unimodal");
        h.push("test_acc_fused".into());
        per(&mut h, "test_acc_unimodal");
        for s in ["q_hat", "coverage", "mean_set_size"] {
            h.push(s.into());
        }
        per(&mut h, "mean_rho");
        h.push("cp_version".into());
        h
    }

    pub fn csv_record(&self) -> Vec<String> {
        let f = |x: f64| x.to_string();
        let mut r = vec![
            self.epoch.to_string(),
            self.phase.as_str().to_string(),
            f(self.loss_total),
            f(self.loss_fused),
        ];
        r.extend(self.loss_unimodal.iter().copied().map(f));
        r.extend(self.loss_diversity.iter().copied().map(f));
        r.push(f(self.train_acc_fused));
        r.extend(self.train_acc_unimodal.iter().copied().map(f));
        r.push(f(self.test_acc_fused));
        r.extend(self.test_acc_unimodal.iter().copied().map(f));
        r.push(f(self.q_hat));
        r.push(f(self.coverage));
        r.push(f(self.mean_set_size));
        r.extend(self.mean_rho.iter().copied().map(f));
        r.push(self.cp_version.to_string());
        r
    }
}

pub fn write_epoch_csv<W: Write>(out: W, reports: &[EpochReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let m = reports.first().map_or(0, |r| r.loss_unimodal.len());
    w.write_record(EpochReport::csv_header(m))?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

/// Serializes plain rows (coverage, GSC, histogram) with a header.
pub fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
