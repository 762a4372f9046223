//! Error metrics between a prediction and a reference field.

use serde::Serialize;

use crate::error::{MnoError, Result};
use crate::field::GridField;

fn check(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(MnoError::invalid(format!("prediction has {} values, truth has {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(MnoError::invalid("metrics need at least one value"));
    }
    Ok(())
}

fn sq_norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum()
}

/// `sqrt(mean((p − t)²))`.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    Ok((sq_norm(pred.iter().zip(truth).map(|(p, t)| p - t)) / pred.len() as f64).sqrt())
}

/// RMSE divided by the root-mean-square of the truth.
pub fn nrmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let denom = sq_norm(truth.iter().copied());
    if denom == 0.0 {
        return Err(MnoError::UndefinedMetric("nRMSE of an all-zero target".into()));
    }
    Ok((sq_norm(pred.iter().zip(truth).map(|(p, t)| p - t)) / denom).sqrt())
}

/// `‖p − t‖₂ / ‖t‖₂`.
pub fn rl2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check(pred, truth)?;
    let denom = sq_norm(truth.iter().copied()).sqrt();
    if denom == 0.0 {
        return Err(MnoError::UndefinedMetric("relative L2 of an all-zero target".into()));
    }
    Ok(sq_norm(pred.iter().zip(truth).map(|(p, t)| p - t)).sqrt() / denom)
}

fn flat(f: &GridField) -> Vec<f64> {
    f.data.iter().copied().collect()
}

fn check_fields(pred: &GridField, truth: &GridField) -> Result<()> {
    if !pred.same_shape(truth) {
        return Err(MnoError::invalid(format!(
            "prediction shape {:?} differs from truth {:?}",
            pred.data.dim(),
            truth.data.dim()
        )));
    }
    Ok(())
}

pub fn metric_rmse(pred: &GridField, truth: &GridField) -> Result<f64> {
    check_fields(pred, truth)?;
    rmse(&flat(pred), &flat(truth))
}

pub fn metric_nrmse(pred: &GridField, truth: &GridField) -> Result<f64> {
    check_fields(pred, truth)?;
    nrmse(&flat(pred), &flat(truth))
}

pub fn metric_rl2(pred: &GridField, truth: &GridField) -> Result<f64> {
    check_fields(pred, truth)?;
    rl2(&flat(pred), &flat(truth))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub rmse: f64,
    pub nrmse: f64,
    pub rl2: f64,
}

impl SampleMetrics {
    pub fn of(pred: &GridField, truth: &GridField) -> Result<Self> {
        check_fields(pred, truth)?;
        let (p, t) = (flat(pred), flat(truth));
        Ok(SampleMetrics { rmse: rmse(&p, &t)?, nrmse: nrmse(&p, &t)?, rl2: rl2(&p, &t)? })
    }
}

/// Per-sample metrics and their means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub task: String,
    pub config_hash: String,
    pub sample_ids: Vec<u32>,
    pub per_sample: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

impl MetricsReport {
    pub fn new(task: &str, config_hash: &str, sample_ids: Vec<u32>, per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() || sample_ids.len() != per_sample.len() {
            return Err(MnoError::invalid("metrics report needs one id per sample and at least one sample"));
        }
        let n = per_sample.len() as f64;
        let mean = SampleMetrics {
            rmse: per_sample.iter().map(|m| m.rmse).sum::<f64>() / n,
            nrmse: per_sample.iter().map(|m| m.nrmse).sum::<f64>() / n,
            rl2: per_sample.iter().map(|m| m.rl2).sum::<f64>() / n,
        };
        Ok(MetricsReport { task: task.into(), config_hash: config_hash.into(), sample_ids, per_sample, mean })
    }

    /// One row per sample, `sample_id,rmse,nrmse,rl2`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,rmse,nrmse,rl2\n");
        for (id, m) in self.sample_ids.iter().zip(&self.per_sample) {
            s.push_str(&format!("{id},{:e},{:e},{:e}\n", m.rmse, m.nrmse, m.rl2));
        }
        s
    }

    /// Canonical JSON summary (means only).
    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "task": self.task,
            "config_hash": self.config_hash,
            "samples": self.per_sample.len(),
            "rmse": self.mean.rmse,
            "nrmse": self.mean.nrmse,
            "rl2": self.mean.rl2,
        })
        .to_string()
    }
}
