//! Steady Darcy flow `−∇·(a∇u) = f` on the unit square with `u = 0` on
//! the boundary.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grf::{gaussian_random_field, threshold, GrfParams};
use crate::error::{MnoError, Result};
use crate::field::{Extent, GridField};

/// Relative residual at which conjugate gradients stops.
pub const CG_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarcyConfig {
    /// Nodes per side, boundary included.
    pub grid: usize,
    /// Constant forcing.
    pub beta: f64,
    /// Coefficient values `(low, high)`.
    pub field_values: (f64, f64),
    pub correlation: GrfParams,
}

impl Default for DarcyConfig {
    fn default() -> Self {
        DarcyConfig { grid: 32, beta: 1.0, field_values: (3.0, 12.0), correlation: GrfParams::default() }
    }
}

impl DarcyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(MnoError::invalid("grid: at least 4 nodes per side"));
        }
        if !self.beta.is_finite() {
            return Err(MnoError::invalid("beta: must be finite"));
        }
        let (lo, hi) = self.field_values;
        if !(lo > 0.0 && hi > 0.0) || !lo.is_finite() || !hi.is_finite() {
            return Err(MnoError::invalid("field_values: both values must be positive and finite"));
        }
        if !(self.correlation.alpha > 0.0) || !self.correlation.tau.is_finite() {
            return Err(MnoError::invalid("correlation: alpha must be positive and tau finite"));
        }
        Ok(())
    }
}

/// Two-valued coefficient from a thresholded Gaussian random field.
pub fn gen_darcy_coefficient(cfg: &DarcyConfig, seed: u64) -> Result<GridField> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian_random_field(&mut rng, cfg.grid, cfg.correlation);
    GridField::scalar(threshold(&g, cfg.field_values.0, cfg.field_values.1), Extent::UNIT)
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Five-point operator with harmonic-mean face coefficients on the
/// interior nodes of an `n × n` node grid.
struct Stencil {
    m: usize,
    /// Per interior node: (west, east, south, north) face coefficients / h².
    faces: Vec<[f64; 4]>,
    diag: Vec<f64>,
}

impl Stencil {
    fn new(a: &Array2<f64>) -> Self {
        let n = a.nrows();
        let m = n - 2;
        let h2 = ((n - 1) as f64).powi(2);
        let mut faces = Vec::with_capacity(m * m);
        let mut diag = Vec::with_capacity(m * m);
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let c = a[[i, j]];
                let f = [
                    harmonic(c, a[[i, j - 1]]) * h2,
                    harmonic(c, a[[i, j + 1]]) * h2,
                    harmonic(c, a[[i - 1, j]]) * h2,
                    harmonic(c, a[[i + 1, j]]) * h2,
                ];
                diag.push(f.iter().sum());
                faces.push(f);
            }
        }
        Stencil { m, faces, diag }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let m = self.m;
        for i in 0..m {
            for j in 0..m {
                let k = i * m + j;
                let f = &self.faces[k];
                let w = if j > 0 { x[k - 1] } else { 0.0 };
                let e = if j + 1 < m { x[k + 1] } else { 0.0 };
                let s = if i > 0 { x[k - m] } else { 0.0 };
                let nn = if i + 1 < m { x[k + m] } else { 0.0 };
                out[k] = self.diag[k] * x[k] - f[0] * w - f[1] * e - f[2] * s - f[3] * nn;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve with a general forcing given at every node (boundary values of
/// `f` are ignored).
pub fn solve_darcy_with_forcing(a: &GridField, f: &Array2<f64>) -> Result<GridField> {
    let n = a.height();
    if a.width() != n || a.channels() != 1 {
        return Err(MnoError::invalid("Darcy coefficient must be a square single-channel field"));
    }
    if n < 3 {
        return Err(MnoError::invalid("Darcy grid needs interior nodes"));
    }
    if f.dim() != (n, n) {
        return Err(MnoError::invalid("forcing shape differs from the coefficient grid"));
    }
    let coef = a.channel(0);
    if coef.iter().any(|&v| !(v > 0.0)) {
        return Err(MnoError::invalid("Darcy coefficient must be strictly positive"));
    }
    let st = Stencil::new(&coef);
    let m = n - 2;
    let rhs: Vec<f64> = (1..n - 1).flat_map(|i| (1..n - 1).map(move |j| (i, j))).map(|(i, j)| f[[i, j]]).collect();
    let x = conjugate_gradient(&st, &rhs, 10 * n * n)?;
    let mut u = Array2::zeros((n, n));
    for i in 0..m {
        for j in 0..m {
            u[[i + 1, j + 1]] = x[i * m + j];
        }
    }
    GridField::scalar(u, a.extent)
}

/// Solve `−∇·(a∇u) = β` with `u = 0` on the boundary.
pub fn solve_darcy(a: &GridField, beta: f64) -> Result<GridField> {
    solve_darcy_with_forcing(a, &Array2::from_elem((a.height(), a.width()), beta))
}

fn conjugate_gradient(st: &Stencil, b: &[f64], max_iter: usize) -> Result<Vec<f64>> {
    let len = b.len();
    let mut x = vec![0.0; len];
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&st.diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; len];
    for _ in 0..max_iter {
        st.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for k in 0..len {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        if dot(&r, &r).sqrt() <= CG_TOLERANCE * b_norm {
            return Ok(x);
        }
        for k in 0..len {
            z[k] = r[k] / st.diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..len {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(MnoError::SolverFailure { iterations: max_iter, residual: dot(&r, &r).sqrt() / b_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_forcing_gives_zero_solution() {
        let a = gen_darcy_coefficient(&DarcyConfig { grid: 16, ..Default::default() }, 1).unwrap();
        let u = solve_darcy(&a, 0.0).unwrap();
        assert!(u.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coefficient_is_two_valued() {
        let cfg = DarcyConfig { grid: 16, ..Default::default() };
        let a = gen_darcy_coefficient(&cfg, 2).unwrap();
        assert!(a.data.iter().all(|&v| v == 3.0 || v == 12.0));
    }

    #[test]
    fn linear_in_forcing() {
        let a = gen_darcy_coefficient(&DarcyConfig { grid: 20, ..Default::default() }, 3).unwrap();
        let u1 = solve_darcy(&a, 1.0).unwrap();
        let u2 = solve_darcy(&a, 2.0).unwrap();
        let scale = u2.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = (&u2.data - &(&u1.data * 2.0)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-10 * scale, "{err}");
    }

    #[test]
    fn manufactured_solution_small_grid() {
        let n = 17;
        let a = GridField::scalar(Array2::ones((n, n)), Extent::UNIT).unwrap();
        let h = 1.0 / (n - 1) as f64;
        let f = Array2::from_shape_fn((n, n), |(i, j)| {
            2.0 * PI * PI * (PI * j as f64 * h).sin() * (PI * i as f64 * h).sin()
        });
        let u = solve_darcy_with_forcing(&a, &f).unwrap();
        let err = u
            .channel(0)
            .indexed_iter()
            .map(|((i, j), v)| (v - (PI * j as f64 * h).sin() * (PI * i as f64 * h).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn iteration_cap_reports_solver_failure() {
        let a = gen_darcy_coefficient(&DarcyConfig { grid: 16, ..Default::default() }, 4).unwrap();
        let st = Stencil::new(&a.channel(0));
        let err = conjugate_gradient(&st, &vec![1.0; 14 * 14], 2).unwrap_err();
        assert!(matches!(err, MnoError::SolverFailure { iterations: 2, residual } if residual > CG_TOLERANCE));
    }

    #[test]
    fn rejects_non_positive_coefficient() {
        let mut a = GridField::scalar(Array2::ones((6, 6)), Extent::UNIT).unwrap();
        a.data[[2, 2, 0]] = 0.0;
        assert!(solve_darcy(&a, 1.0).is_err());
        assert!(DarcyConfig { field_values: (-1.0, 2.0), ..Default::default() }.validate().is_err());
    }
}
