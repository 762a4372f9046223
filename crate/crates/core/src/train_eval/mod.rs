//! Metrics, optimiser, training loop, gradient checking and spectral
//! diagnostics.

mod fit;
mod gradcheck;
mod metrics;
mod optim;
mod spectrum;

pub use fit::{
    batch_indices, batch_loss_grad, evaluate, fit, fresh_optimizer, loss_and_seed, loss_curve_csv, sample_loss_grad,
    LossKind, LossPoint, LrSchedule, TrainConfig,
};
pub use gradcheck::{gradient_check, gradient_check_fn, GradCheckReport, FD_STEP, MAX_CHECK_PARAMS, REL_ERR_FLOOR};
pub use metrics::{metric_nrmse, metric_rl2, metric_rmse, nrmse, rl2, rmse, MetricsReport, SampleMetrics};
pub use optim::{AdamConfig, OptimizerState};
pub use spectrum::{
    average_profiles, depth_csv, depth_profile, dft2_unitary, spectrum_profile, DepthPoint, SpectrumProfile, LOG_FLOOR,
};

use sha2::{Digest, Sha256};

/// Hex SHA-256 of a value's canonical JSON.
pub fn config_hash<S: serde::Serialize>(value: &S) -> crate::Result<String> {
    let json = serde_json::to_value(value)?.to_string();
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
