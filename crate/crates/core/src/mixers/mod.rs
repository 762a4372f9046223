//! Token mixers and the bidirectional grid scan.
//!
//! Every block exists in two forms: a tape form (`forward*`) used inside the
//! operator stack, and a standalone `apply`/function form that evaluates a
//! single block on a plain matrix.

mod attention;
mod layout;
mod s6;

pub use attention::{galerkin_attention, layer_norm, softmax_attention, softmax_attention_weights, AttentionParams, DivisorMode};
pub use layout::{inverse_permutation, scan_expand, scan_merge, MergeReduction, ScanLayout, ScanPath};
pub use s6::{CrossS6BlockParams, S6BlockParams, SelectionProj};

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::Real;

/// Epsilon used by every layer normalisation in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform `±1/sqrt(fan_in)` initialisation.
pub(crate) fn init_uniform<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::of(rng.random_range(-bound..bound)))
}
