//! Neural operators whose token mixer is a selective state-space scan.
//!
//! The crate is organised bottom-up:
//!
//! * [`ssm_core`]: discretisation of diagonal state-space models and the
//!   selective scan, in recurrent and non-recurrent (attention) form.
//! * [`autodiff`]: a small reverse-mode tape over dense matrices used to
//!   train every block.
//! * [`mixers`]: S6, cross-S6, softmax and Galerkin attention blocks plus the
//!   bidirectional grid scan expand/merge.
//! * [`operator`]: the lift → iterate → project operator stack and its
//!   checkpoint format.
//! * [`pde_data`]: reference solvers (Darcy, shallow water,
//!   diffusion-reaction) and the dataset file format.
//! * [`train_eval`]: metrics, Adam, the training loop, gradient checking and
//!   Fourier diagnostics of feature maps.
//!
//! Batch-level work (per-sample gradients, dataset generation, Monte Carlo
//! trials) goes through [`exec`], which uses rayon when the `parallel`
//! feature is enabled and a plain sequential loop otherwise.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod exec;
pub mod field;
pub mod mixers;
pub mod operator;
pub mod params;
pub mod pde_data;
pub mod ssm_core;
pub mod train_eval;

pub use autodiff::{Real, Tape, Var};
pub use error::{MnoError, Result};
pub use field::{Extent, GridField};
pub use params::{ParamId, ParamStore};
