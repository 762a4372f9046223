//! Fourier diagnostics of feature maps.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::autodiff::Real;
use crate::error::{MnoError, Result};
use crate::field::GridField;
use crate::operator::{OperatorModel, TapKind};

/// Amplitudes below this are clamped before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Log amplitude along the half-diagonal `(k, k)`, `k = 0..=n/2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumProfile {
    /// Angular frequency in units of π (`2k/n`).
    pub frequencies: Vec<f64>,
    pub log_amplitude: Vec<f64>,
    /// Value at the last frequency minus value at zero frequency.
    pub delta_log_amplitude: f64,
}

impl SpectrumProfile {
    fn from_log(n: usize, log_amplitude: Vec<f64>) -> Self {
        let frequencies = (0..log_amplitude.len()).map(|k| 2.0 * k as f64 / n as f64).collect();
        let delta_log_amplitude = log_amplitude[log_amplitude.len() - 1] - log_amplitude[0];
        SpectrumProfile { frequencies, log_amplitude, delta_log_amplitude }
    }

    /// `frequency_pi,log_amplitude` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frequency_pi,log_amplitude\n");
        for (f, a) in self.frequencies.iter().zip(&self.log_amplitude) {
            s.push_str(&format!("{f},{a:e}\n"));
        }
        s
    }
}

/// Unitary 2-D DFT (`1/sqrt(HW)` normalisation).
pub fn dft2_unitary(x: &Array2<f64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let mut planner = FftPlanner::<f64>::new();
    let mut data: Array2<Complex64> = x.mapv(|v| Complex64::new(v, 0.0));
    let row_fft = planner.plan_fft_forward(w);
    for mut row in data.rows_mut() {
        let mut buf: Vec<Complex64> = row.to_vec();
        row_fft.process(&mut buf);
        row.assign(&ndarray::ArrayView1::from(&buf));
    }
    let col_fft = planner.plan_fft_forward(h);
    for mut col in data.columns_mut() {
        let mut buf: Vec<Complex64> = col.to_vec();
        col_fft.process(&mut buf);
        col.assign(&ndarray::ArrayView1::from(&buf));
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    data.mapv_inplace(|c| c * norm);
    data
}

/// Half-diagonal profile of one square multi-channel map, amplitude
/// averaged over channels.
pub fn spectrum_profile(map: &GridField) -> Result<SpectrumProfile> {
    let (h, w, c) = map.data.dim();
    if h != w {
        return Err(MnoError::invalid(format!("spectrum needs a square map, got {h}x{w}")));
    }
    if h < 2 {
        return Err(MnoError::invalid("spectrum needs at least a 2x2 map"));
    }
    let half = h / 2;
    let mut amp = vec![0.0; half + 1];
    for ch in 0..c {
        let f = dft2_unitary(&map.channel(ch));
        for (k, a) in amp.iter_mut().enumerate() {
            *a += f[[k, k]].norm();
        }
    }
    let log = amp.iter().map(|a| (a / c as f64).max(LOG_FLOOR).ln()).collect();
    Ok(SpectrumProfile::from_log(h, log))
}

/// Mean of log profiles (all must share a grid size).
pub fn average_profiles(profiles: &[SpectrumProfile]) -> Result<SpectrumProfile> {
    let first = profiles.first().ok_or_else(|| MnoError::invalid("no profiles to average"))?;
    if profiles.iter().any(|p| p.frequencies != first.frequencies) {
        return Err(MnoError::invalid("profiles disagree on frequency samples"));
    }
    let n = profiles.len() as f64;
    let log_amplitude: Vec<f64> = (0..first.log_amplitude.len())
        .map(|k| profiles.iter().map(|p| p.log_amplitude[k]).sum::<f64>() / n)
        .collect();
    let delta_log_amplitude = log_amplitude[log_amplitude.len() - 1] - log_amplitude[0];
    Ok(SpectrumProfile { frequencies: first.frequencies.clone(), log_amplitude, delta_log_amplitude })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthPoint {
    pub layer: usize,
    pub kind: TapKind,
    pub depth: f64,
    pub delta_log_amplitude: f64,
}

/// Profiles at every tap of the model, averaged over `inputs`.
pub fn depth_profile<T: Real>(
    model: &OperatorModel<T>,
    inputs: &[GridField],
) -> Result<(Vec<DepthPoint>, Vec<SpectrumProfile>)> {
    if inputs.is_empty() {
        return Err(MnoError::invalid("depth profile needs at least one input"));
    }
    let mut per_tap: Vec<Vec<SpectrumProfile>> = Vec::new();
    let mut meta = Vec::new();
    for a in inputs {
        let (_, taps) = model.forward_with_taps(a)?;
        if per_tap.is_empty() {
            per_tap = vec![Vec::with_capacity(inputs.len()); taps.len()];
            meta = taps.iter().map(|t| (t.layer, t.kind, t.depth)).collect();
        }
        for (k, t) in taps.iter().enumerate() {
            per_tap[k].push(spectrum_profile(&t.field)?);
        }
    }
    let profiles = per_tap.iter().map(|p| average_profiles(p)).collect::<Result<Vec<_>>>()?;
    let points = meta
        .into_iter()
        .zip(&profiles)
        .map(|((layer, kind, depth), p)| DepthPoint { layer, kind, depth, delta_log_amplitude: p.delta_log_amplitude })
        .collect();
    Ok((points, profiles))
}

/// `depth,layer,kind,delta_log_amplitude` rows.
pub fn depth_csv(points: &[DepthPoint]) -> String {
    let mut s = String::from("depth,layer,kind,delta_log_amplitude\n");
    for p in points {
        let kind = match p.kind {
            TapKind::Operator => "operator",
            TapKind::Mlp => "mlp",
        };
        s.push_str(&format!("{},{},{kind},{:e}\n", p.depth, p.layer, p.delta_log_amplitude));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Extent;
    use ndarray::Array3;

    fn field(h: usize, f: impl Fn(usize, usize) -> f64) -> GridField {
        GridField::new(Array3::from_shape_fn((h, h, 1), |(i, j, _)| f(i, j)), Extent::UNIT, None).unwrap()
    }

    #[test]
    fn constant_map_has_negative_delta() {
        let p = spectrum_profile(&field(8, |_, _| 1.0)).unwrap();
        assert!((p.log_amplitude[0] - 8.0f64.ln()).abs() < 1e-12);
        assert_eq!(p.log_amplitude[4], LOG_FLOOR.ln());
        assert!(p.delta_log_amplitude < -20.0);
    }

    #[test]
    fn checkerboard_has_positive_delta() {
        let p = spectrum_profile(&field(8, |i, j| if (i + j) % 2 == 0 { 1.0 } else { -1.0 })).unwrap();
        assert!((p.log_amplitude[4] - 8.0f64.ln()).abs() < 1e-12);
        assert!(p.delta_log_amplitude > 20.0);
        assert_eq!(p.frequencies, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn dft_matches_naive_sum() {
        let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let f = dft2_unitary(&x);
        for (u, v) in [(0, 0), (1, 2), (2, 3)] {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..3 {
                for j in 0..4 {
                    let ph = -2.0 * std::f64::consts::PI * (u as f64 * i as f64 / 3.0 + v as f64 * j as f64 / 4.0);
                    acc += Complex64::from_polar(x[[i, j]], ph);
                }
            }
            assert!((f[[u, v]] - acc / 12f64.sqrt()).norm() < 1e-12);
        }
    }

    #[test]
    fn non_square_rejected() {
        assert!(spectrum_profile(&GridField::zeros(4, 6, 1)).is_err());
    }
}
