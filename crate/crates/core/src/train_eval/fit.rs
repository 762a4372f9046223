//! Minibatch training loop.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::SampleMetrics;
use super::optim::{AdamConfig, OptimizerState};
use crate::autodiff::{Real, Tape};
use crate::error::{MnoError, Result};
use crate::exec;
use crate::field::GridField;
use crate::operator::OperatorModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Per-sample `‖p − t‖ / ‖t‖`.
    #[default]
    RelativeL2,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Hold `lr` after warmup.
    #[default]
    Constant,
    /// Half-cosine from `lr` after warmup down to zero at `steps`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub schedule: LrSchedule,
    pub loss: LossKind,
    pub seed: u64,
    /// Call the checkpoint hook every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 100,
            schedule: LrSchedule::Constant,
            loss: LossKind::RelativeL2,
            seed: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MnoError::invalid("batch_size: must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(MnoError::invalid("lr: must be finite and non-negative"));
        }
        Ok(())
    }

    /// Learning rate of update number `step` (1-based): linear warmup then
    /// the configured schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("step,loss\n");
    for p in curve {
        s.push_str(&format!("{},{:e}\n", p.step, p.loss));
    }
    s
}

/// Loss and `∂loss/∂pred` for one sample, computed in `f64`.
pub fn loss_and_seed<T: Real>(pred: &Array2<T>, target: &Array2<T>, kind: LossKind) -> (f64, Array2<T>) {
    let diff = Array2::from_shape_fn(pred.dim(), |ix| pred[ix].f64() - target[ix].f64());
    match kind {
        LossKind::Mse => {
            let n = diff.len() as f64;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
            (loss, diff.mapv(|d| T::of(2.0 * d / n)))
        }
        LossKind::RelativeL2 => {
            let dn = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            let tn = target.iter().map(|t| t.f64() * t.f64()).sum::<f64>().sqrt();
            if tn == 0.0 {
                // Undefined ratio; fall back to the absolute norm.
                let seed = if dn == 0.0 { diff.mapv(|_| T::zero()) } else { diff.mapv(|d| T::of(d / dn)) };
                return (dn, seed);
            }
            let seed = if dn == 0.0 { diff.mapv(|_| T::zero()) } else { diff.mapv(|d| T::of(d / (dn * tn))) };
            (dn / tn, seed)
        }
    }
}

/// Loss and parameter gradients (store order) for a single sample.
pub fn sample_loss_grad<T: Real>(
    model: &OperatorModel<T>,
    input: &GridField,
    target: &GridField,
    kind: LossKind,
) -> Result<(f64, Vec<Array2<T>>)> {
    let mut tape = Tape::new();
    let pv = tape.bind_params(&model.params);
    let rec = model.record(&mut tape, &pv, input)?;
    let t = target.to_tokens().mapv(T::of);
    if t.dim() != tape.value(rec.output).dim() {
        return Err(MnoError::invalid(format!(
            "target tokens {:?} do not match prediction {:?}",
            t.dim(),
            tape.value(rec.output).dim()
        )));
    }
    let (loss, seed) = loss_and_seed(tape.value(rec.output), &t, kind);
    let grads = tape.backward(rec.output, seed).params(&pv, &model.params);
    Ok((loss, grads))
}

/// Sample indices of update `step` (0-based): consecutive slices of a
/// per-epoch shuffle derived from `seed`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|k| {
            let global = step * batch as u64 + k;
            let epoch = global / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                order.shuffle(&mut rng);
                cached = Some((epoch, order));
            }
            cached.as_ref().expect("cached order").1[(global % n as u64) as usize]
        })
        .collect()
}

/// Mean loss and mean gradient over a batch; samples are evaluated through
/// [`exec::map_range`] and summed in index order.
pub fn batch_loss_grad<T: Real>(
    model: &OperatorModel<T>,
    data: &[(GridField, GridField)],
    indices: &[usize],
    kind: LossKind,
) -> Result<(f64, Vec<Array2<T>>)> {
    let per = exec::map_range(indices.len(), |k| {
        let (x, y) = &data[indices[k]];
        sample_loss_grad(model, x, y, kind)
    });
    let mut loss = 0.0;
    let mut total: Option<Vec<Array2<T>>> = None;
    for r in per {
        let (l, g) = r?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        }
    }
    let n = indices.len() as f64;
    let mut grads = total.unwrap_or_default();
    let inv = T::of(1.0 / n);
    grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * inv));
    Ok((loss / n, grads))
}

/// Train until the optimiser has taken `cfg.steps` updates, resuming from
/// its current step. Appends one point per update to `curve`. `checkpoint`
/// is called every `cfg.checkpoint_every` steps and after the last one; on
/// divergence the error is returned and the last checkpoint stays as it was.
pub fn fit<T, F>(
    model: &mut OperatorModel<T>,
    opt: &mut OptimizerState<T>,
    data: &[(GridField, GridField)],
    cfg: &TrainConfig,
    curve: &mut Vec<LossPoint>,
    mut checkpoint: F,
) -> Result<()>
where
    T: Real,
    F: FnMut(u64, &OperatorModel<T>, &OptimizerState<T>) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(MnoError::invalid("training set is empty"));
    }
    let batch = cfg.batch_size.min(data.len());
    while opt.step < cfg.steps {
        let step = opt.step + 1;
        let idx = batch_indices(data.len(), batch, cfg.seed, opt.step);
        let (loss, grads) = batch_loss_grad(model, data, &idx, cfg.loss)?;
        if !loss.is_finite() {
            return Err(MnoError::Divergence { step, what: format!("training loss is {loss}") });
        }
        opt.adam_step(&mut model.params, &grads, cfg.lr_at(step)).map_err(|e| match e {
            MnoError::Divergence { what, .. } => MnoError::Divergence { step, what },
            other => other,
        })?;
        curve.push(LossPoint { step, loss });
        if (cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every)) || step == cfg.steps {
            checkpoint(step, model, opt)?;
        }
    }
    Ok(())
}

/// Metrics of the model on every pair in `data`.
pub fn evaluate<T: Real>(model: &OperatorModel<T>, data: &[(GridField, GridField)]) -> Result<Vec<SampleMetrics>> {
    exec::map_range(data.len(), |k| {
        let (x, y) = &data[k];
        SampleMetrics::of(&model.forward(x)?, y)
    })
    .into_iter()
    .collect()
}

/// Optimiser state for a fresh run.
pub fn fresh_optimizer<T: Real>(model: &OperatorModel<T>, cfg: &TrainConfig) -> OptimizerState<T> {
    OptimizerState::new(&model.params, cfg.adam)
}
