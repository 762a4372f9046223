//! Gaussian random fields synthesised in Fourier space.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Covariance `(−Δ + τ²)^(−α)` on the periodic unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfParams {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for GrfParams {
    fn default() -> Self {
        GrfParams { alpha: 2.0, tau: 3.0 }
    }
}

/// Signed integer wavenumber of FFT bin `i` on an `n`-point axis.
pub(crate) fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// In-place 2-D FFT (forward or inverse, unnormalised).
pub(crate) fn fft2(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut buf = Vec::with_capacity(h.max(w));
    for mut r in data.rows_mut() {
        buf.clear();
        buf.extend(r.iter().copied());
        row.process(&mut buf);
        r.iter_mut().zip(&buf).for_each(|(d, s)| *d = *s);
    }
    for mut c in data.columns_mut() {
        buf.clear();
        buf.extend(c.iter().copied());
        col.process(&mut buf);
        c.iter_mut().zip(&buf).for_each(|(d, s)| *d = *s);
    }
}

/// Filter white noise by `mask(kx, ky)` in Fourier space and return the real
/// part of the result. The zero mode is removed when `mask(0, 0) == 0`.
pub(crate) fn filtered_noise<R: Rng>(rng: &mut R, n: usize, mask: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let mut data: Array2<Complex64> = Array2::from_shape_simple_fn((n, n), || {
        let v: f64 = rng.sample(StandardNormal);
        Complex64::new(v, 0.0)
    });
    fft2(&mut data, false);
    for ((i, j), v) in data.indexed_iter_mut() {
        *v *= mask(wavenumber(j, n), wavenumber(i, n));
    }
    fft2(&mut data, true);
    let scale = 1.0 / (n * n) as f64;
    data.mapv(|c| c.re * scale)
}

/// Zero-mean Gaussian random field on an `n × n` grid.
pub fn gaussian_random_field<R: Rng>(rng: &mut R, n: usize, params: GrfParams) -> Array2<f64> {
    let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    filtered_noise(rng, n, |kx, ky| {
        if kx == 0.0 && ky == 0.0 {
            0.0
        } else {
            (four_pi2 * (kx * kx + ky * ky) + params.tau * params.tau).powf(-params.alpha / 2.0)
        }
    })
}

/// Two-valued field: `high` where `g ≥ 0`, `low` elsewhere.
pub fn threshold(g: &Array2<f64>, low: f64, high: f64) -> Array2<f64> {
    g.mapv(|v| if v >= 0.0 { high } else { low })
}
