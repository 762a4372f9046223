//! Adam with bias correction and decoupled weight decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{MnoError, Result};
use crate::operator::Container;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        OptimizerState { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update with learning rate `lr`. Frozen parameters are skipped;
    /// bounds are enforced afterwards.
    pub fn adam_step(&mut self, store: &mut ParamStore<T>, grads: &[Array2<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(MnoError::invalid(format!(
                "{} gradients for {} parameters ({} moments)",
                grads.len(),
                store.len(),
                self.m.len()
            )));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if g.dim() != p.value.dim() {
                return Err(MnoError::invalid(format!("gradient shape mismatch for {}", p.name)));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(MnoError::Divergence { step: self.step + 1, what: format!("non-finite gradient for {}", p.name) });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, eps, decay) = (T::of(lr), T::of(c.eps), T::of(lr * c.weight_decay));
        for (k, ((_, p), g)) in store.iter_mut().zip(grads).enumerate() {
            if !p.trainable {
                continue;
            }
            Zip::from(&mut p.value).and(&mut self.m[k]).and(&mut self.v[k]).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - decay * *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            });
        }
        store.enforce_bounds();
        Ok(())
    }

    /// Moments as named `f32` tensors for checkpointing.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Array2<f32>)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (k, (_, p)) in store.iter().enumerate() {
            out.push((format!("adam.m.{}", p.name), self.m[k].mapv(|x| x.f64() as f32)));
            out.push((format!("adam.v.{}", p.name), self.v[k].mapv(|x| x.f64() as f32)));
        }
        out
    }

    /// Restore moments saved by [`export`](Self::export).
    pub fn import(store: &ParamStore<T>, config: AdamConfig, step: u64, c: &Container) -> Result<Self> {
        let mut st = Self::new(store, config);
        st.step = step;
        for (k, (_, p)) in store.iter().enumerate() {
            for (dst, kind) in [(&mut st.m[k], "m"), (&mut st.v[k], "v")] {
                let name = format!("adam.{kind}.{}", p.name);
                let t = c
                    .tensor(&name)
                    .ok_or_else(|| MnoError::Format { offset: 0, message: format!("checkpoint lacks {name}") })?;
                if t.dim() != dst.dim() {
                    return Err(MnoError::Format { offset: 0, message: format!("{name} has the wrong shape") });
                }
                *dst = t.mapv(|x| T::of(x as f64));
            }
        }
        Ok(st)
    }
}
