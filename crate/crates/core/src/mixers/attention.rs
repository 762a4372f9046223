use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_uniform, LAYER_NORM_EPS};
use crate::autodiff::{ParamVars, Real, Tape, Var};
use crate::error::{MnoError, Result};
use crate::params::{ParamId, ParamStore};

/// Divisor applied to the Galerkin product `Q (K̃ᵀ Ṽ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivisorMode {
    /// Divide by the sequence length `L`.
    SeqLen,
    /// Divide by the key width `d_k`.
    HeadDim,
}

/// Single-head attention projections.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub divisor_mode: DivisorMode,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        d_k: usize,
        d_v: usize,
        divisor_mode: DivisorMode,
        rng: &mut R,
    ) -> Self {
        let w_q = store.add(format!("{prefix}.w_q"), init_uniform(rng, d_model, d_k, d_model));
        let w_k = store.add(format!("{prefix}.w_k"), init_uniform(rng, d_model, d_k, d_model));
        let w_v = store.add(format!("{prefix}.w_v"), init_uniform(rng, d_model, d_v, d_model));
        let w_o = store.add(format!("{prefix}.w_o"), init_uniform(rng, d_v, d_model, d_v));
        AttentionParams { d_model, d_k, d_v, w_q, w_k, w_v, w_o, divisor_mode }
    }

    /// `softmax(Q Kᵀ / sqrt(d_k)) V`, projected back to `d_model`.
    pub fn forward_softmax<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Var {
        let q = tape.matmul(x, pv.get(self.w_q));
        let k = tape.matmul(x, pv.get(self.w_k));
        let v = tape.matmul(x, pv.get(self.w_v));
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let logits = tape.scale(logits, T::of(1.0 / (self.d_k as f64).sqrt()));
        let weights = tape.softmax_rows(logits);
        let mixed = tape.matmul(weights, v);
        tape.matmul(mixed, pv.get(self.w_o))
    }

    /// `Q (LN(K)ᵀ LN(V)) / divisor`, projected back to `d_model`. Cost is
    /// linear in the sequence length.
    pub fn forward_galerkin<T: Real>(&self, tape: &mut Tape<T>, pv: &ParamVars, x: Var) -> Var {
        let len = tape.value(x).nrows();
        let q = tape.matmul(x, pv.get(self.w_q));
        let k = tape.matmul(x, pv.get(self.w_k));
        let v = tape.matmul(x, pv.get(self.w_v));
        let kn = tape.layer_norm_rows(k, T::of(LAYER_NORM_EPS));
        let vn = tape.layer_norm_rows(v, T::of(LAYER_NORM_EPS));
        let knt = tape.transpose(kn);
        let kv = tape.matmul(knt, vn);
        let mixed = tape.matmul(q, kv);
        let divisor = match self.divisor_mode {
            DivisorMode::SeqLen => len,
            DivisorMode::HeadDim => self.d_k,
        };
        let mixed = tape.scale(mixed, T::of(1.0 / divisor as f64));
        tape.matmul(mixed, pv.get(self.w_o))
    }

    fn check_input<T: Real>(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != self.d_model {
            return Err(MnoError::invalid(format!("input width {} != d_model {}", x.ncols(), self.d_model)));
        }
        if x.nrows() == 0 {
            return Err(MnoError::invalid("attention needs at least one token"));
        }
        Ok(())
    }
}

/// Softmax attention on a standalone `L × D` matrix.
pub fn softmax_attention<T: Real>(x: &Array2<T>, params: &AttentionParams, store: &ParamStore<T>) -> Result<Array2<T>> {
    params.check_input(x)?;
    let mut tape = Tape::new();
    let pv = tape.bind_params(store);
    let xv = tape.constant(x.clone());
    let out = params.forward_softmax(&mut tape, &pv, xv);
    Ok(tape.value(out).clone())
}

/// The `L × L` row-stochastic attention matrix of [`softmax_attention`].
pub fn softmax_attention_weights<T: Real>(
    x: &Array2<T>,
    params: &AttentionParams,
    store: &ParamStore<T>,
) -> Result<Array2<T>> {
    params.check_input(x)?;
    let q = x.dot(store.get(params.w_q));
    let k = x.dot(store.get(params.w_k));
    let mut tape = Tape::new();
    let logits = tape.constant(q.dot(&k.t()) * T::of(1.0 / (params.d_k as f64).sqrt()));
    let w = tape.softmax_rows(logits);
    Ok(tape.value(w).clone())
}

/// Galerkin attention on a standalone `L × D` matrix; needs `L ≥ 2` and
/// `d_k, d_v ≥ 2` so the normalisations are non-degenerate.
pub fn galerkin_attention<T: Real>(x: &Array2<T>, params: &AttentionParams, store: &ParamStore<T>) -> Result<Array2<T>> {
    params.check_input(x)?;
    if x.nrows() < 2 {
        return Err(MnoError::invalid("Galerkin attention needs at least two tokens"));
    }
    if params.d_k < 2 || params.d_v < 2 {
        return Err(MnoError::invalid("Galerkin attention needs key and value widths of at least two"));
    }
    let mut tape = Tape::new();
    let pv = tape.bind_params(store);
    let xv = tape.constant(x.clone());
    let out = params.forward_galerkin(&mut tape, &pv, xv);
    Ok(tape.value(out).clone())
}

/// Per-token layer normalisation with affine `gain`/`bias` of length `D`.
pub fn layer_norm(x: &Array2<f64>, gain: &[f64], bias: &[f64]) -> Result<Array2<f64>> {
    let d = x.ncols();
    if d < 2 {
        return Err(MnoError::invalid("layer normalisation needs at least two features"));
    }
    if gain.len() != d || bias.len() != d {
        return Err(MnoError::invalid("gain/bias length must equal the feature width"));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let n = tape.layer_norm_rows(xv, LAYER_NORM_EPS);
    let g = tape.constant(Array2::from_shape_vec((1, d), gain.to_vec()).expect("row"));
    let b = tape.constant(Array2::from_shape_vec((1, d), bias.to_vec()).expect("row"));
    let scaled = tape.mul_row(n, g);
    let out = tape.add_row(scaled, b);
    Ok(tape.value(out).clone())
}
