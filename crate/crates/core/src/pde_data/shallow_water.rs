//! Two-dimensional shallow-water equations on `[−2.5, 2.5]²`: cell-centred
//! finite volumes with Rusanov fluxes and CFL-limited forward Euler steps.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MnoError, Result};
use crate::field::{Extent, GridField};

pub const SWE_HALF_WIDTH: f64 = 2.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Zero-gradient ghost cells.
    #[default]
    Outflow,
    /// Mirrored ghost cells with the normal momentum negated.
    Reflective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SWEConfig {
    pub grid: usize,
    pub t_end: f64,
    pub n_frames: usize,
    pub g_r: f64,
    pub r_range: (f64, f64),
    pub cfl: f64,
    pub boundary: Boundary,
    /// Water height inside and outside the dam radius.
    pub h_inside: f64,
    pub h_outside: f64,
}

impl Default for SWEConfig {
    fn default() -> Self {
        SWEConfig {
            grid: 32,
            t_end: 1.0,
            n_frames: 101,
            g_r: 9.81,
            r_range: (0.3, 0.7),
            cfl: 0.45,
            boundary: Boundary::Outflow,
            h_inside: 2.0,
            h_outside: 1.0,
        }
    }
}

impl SWEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(MnoError::invalid("grid: at least 4 cells per side"));
        }
        if !(self.cfl > 0.0 && self.cfl <= 0.9) {
            return Err(MnoError::invalid(format!("cfl: {} outside (0, 0.9]", self.cfl)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(MnoError::invalid("t_end: must be positive"));
        }
        if self.n_frames < 2 {
            return Err(MnoError::invalid("n_frames: at least 2"));
        }
        if !(self.g_r > 0.0 && self.g_r.is_finite()) {
            return Err(MnoError::invalid("g_r: must be positive"));
        }
        let (lo, hi) = self.r_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(MnoError::invalid("r_range: need 0 < low ≤ high"));
        }
        if !(self.h_inside > 0.0 && self.h_outside > 0.0) {
            return Err(MnoError::invalid("h_inside, h_outside: must be positive"));
        }
        Ok(())
    }

    pub fn frame_dt(&self) -> f64 {
        self.t_end / (self.n_frames - 1) as f64
    }
}

/// Conserved state `(h, hu, hv)` plus bathymetry `b`. Rows index `y`,
/// columns index `x`.
#[derive(Clone, Debug)]
pub struct ShallowWaterSolver {
    pub h: Array2<f64>,
    pub hu: Array2<f64>,
    pub hv: Array2<f64>,
    pub b: Array2<f64>,
    pub dx: f64,
    pub dy: f64,
    pub g: f64,
    pub boundary: Boundary,
    pub time: f64,
    pub steps: usize,
}

/// Rusanov flux normal to a face. `q = (h, hn, ht)` with `hn` the normal
/// and `ht` the tangential momentum.
#[inline]
fn rusanov(g: f64, l: [f64; 3], r: [f64; 3]) -> [f64; 3] {
    let flux = |q: [f64; 3]| {
        let un = q[1] / q[0];
        [q[1], q[1] * un + 0.5 * g * q[0] * q[0], q[2] * un]
    };
    let (fl, fr) = (flux(l), flux(r));
    let s = (l[1] / l[0]).abs().max((r[1] / r[0]).abs()) + (g * l[0]).sqrt().max((g * r[0]).sqrt());
    [
        0.5 * (fl[0] + fr[0]) - 0.5 * s * (r[0] - l[0]),
        0.5 * (fl[1] + fr[1]) - 0.5 * s * (r[1] - l[1]),
        0.5 * (fl[2] + fr[2]) - 0.5 * s * (r[2] - l[2]),
    ]
}

impl ShallowWaterSolver {
    pub fn new(h: Array2<f64>, dx: f64, g: f64, boundary: Boundary) -> Self {
        let dim = h.dim();
        ShallowWaterSolver {
            hu: Array2::zeros(dim),
            hv: Array2::zeros(dim),
            b: Array2::zeros(dim),
            h,
            dx,
            dy: dx,
            g,
            boundary,
            time: 0.0,
            steps: 0,
        }
    }

    /// Radial dam break of radius `r` centred on the domain.
    pub fn dam_break(cfg: &SWEConfig, r: f64) -> Self {
        let n = cfg.grid;
        let dx = 2.0 * SWE_HALF_WIDTH / n as f64;
        let centre = |i: usize| -SWE_HALF_WIDTH + (i as f64 + 0.5) * dx;
        let h = Array2::from_shape_fn((n, n), |(i, j)| {
            let (x, y) = (centre(j), centre(i));
            if (x * x + y * y).sqrt() < r {
                cfg.h_inside
            } else {
                cfg.h_outside
            }
        });
        Self::new(h, dx, cfg.g_r, cfg.boundary)
    }

    pub fn total_mass(&self) -> f64 {
        self.h.sum() * self.dx * self.dy
    }

    fn max_speed(&self) -> f64 {
        let mut s = 0.0f64;
        for ((h, hu), hv) in self.h.iter().zip(&self.hu).zip(&self.hv) {
            let c = (self.g * h).sqrt();
            s = s.max((hu / h).abs() + c).max((hv / h).abs() + c);
        }
        s
    }

    /// Largest stable step for Courant number `cfl`.
    pub fn stable_dt(&self, cfl: f64) -> f64 {
        let s = self.max_speed();
        if s > 0.0 {
            cfl * self.dx.min(self.dy) / s
        } else {
            f64::INFINITY
        }
    }

    /// Ghost value beyond an edge cell, given in face-normal ordering.
    fn ghost(&self, q: [f64; 3]) -> [f64; 3] {
        match self.boundary {
            Boundary::Outflow => q,
            Boundary::Reflective => [q[0], -q[1], q[2]],
        }
    }

    /// One forward Euler step of size `dt`.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        let (ny, nx) = self.h.dim();
        let mut dh = Array2::zeros((ny, nx));
        let mut dhu = Array2::zeros((ny, nx));
        let mut dhv = Array2::zeros((ny, nx));
        let (cx, cy) = (dt / self.dx, dt / self.dy);
        // x faces: normal momentum hu
        for i in 0..ny {
            for f in 0..=nx {
                let l = if f > 0 { Some([self.h[[i, f - 1]], self.hu[[i, f - 1]], self.hv[[i, f - 1]]]) } else { None };
                let r = if f < nx { Some([self.h[[i, f]], self.hu[[i, f]], self.hv[[i, f]]]) } else { None };
                let (l, r) = match (l, r) {
                    (Some(l), Some(r)) => (l, r),
                    (Some(l), None) => (l, self.ghost(l)),
                    (None, Some(r)) => (self.ghost(r), r),
                    (None, None) => unreachable!(),
                };
                let fl = rusanov(self.g, l, r);
                if f > 0 {
                    dh[[i, f - 1]] -= cx * fl[0];
                    dhu[[i, f - 1]] -= cx * fl[1];
                    dhv[[i, f - 1]] -= cx * fl[2];
                }
                if f < nx {
                    dh[[i, f]] += cx * fl[0];
                    dhu[[i, f]] += cx * fl[1];
                    dhv[[i, f]] += cx * fl[2];
                }
            }
        }
        // y faces: normal momentum hv
        for f in 0..=ny {
            for j in 0..nx {
                let l = if f > 0 { Some([self.h[[f - 1, j]], self.hv[[f - 1, j]], self.hu[[f - 1, j]]]) } else { None };
                let r = if f < ny { Some([self.h[[f, j]], self.hv[[f, j]], self.hu[[f, j]]]) } else { None };
                let (l, r) = match (l, r) {
                    (Some(l), Some(r)) => (l, r),
                    (Some(l), None) => (l, self.ghost(l)),
                    (None, Some(r)) => (self.ghost(r), r),
                    (None, None) => unreachable!(),
                };
                let fl = rusanov(self.g, l, r);
                if f > 0 {
                    dh[[f - 1, j]] -= cy * fl[0];
                    dhv[[f - 1, j]] -= cy * fl[1];
                    dhu[[f - 1, j]] -= cy * fl[2];
                }
                if f < ny {
                    dh[[f, j]] += cy * fl[0];
                    dhv[[f, j]] += cy * fl[1];
                    dhu[[f, j]] += cy * fl[2];
                }
            }
        }
        // bathymetry source −g h ∇b, centred differences
        if self.b.iter().any(|&v| v != 0.0) {
            for i in 0..ny {
                for j in 0..nx {
                    let bx = (self.b[[i, (j + 1).min(nx - 1)]] - self.b[[i, j.saturating_sub(1)]]) / (2.0 * self.dx);
                    let by = (self.b[[(i + 1).min(ny - 1), j]] - self.b[[i.saturating_sub(1), j]]) / (2.0 * self.dy);
                    dhu[[i, j]] -= dt * self.g * self.h[[i, j]] * bx;
                    dhv[[i, j]] -= dt * self.g * self.h[[i, j]] * by;
                }
            }
        }
        self.h += &dh;
        self.hu += &dhu;
        self.hv += &dhv;
        self.time += dt;
        self.steps += 1;
        if let Some(((i, j), &v)) = self.h.indexed_iter().find(|(_, v)| !(**v > 0.0)) {
            return Err(MnoError::Positivity(format!("h = {v} at cell ({i}, {j}) after step {}", self.steps)));
        }
        Ok(())
    }

    /// Advance to time `t` with CFL-limited steps that land exactly on `t`.
    pub fn advance_to(&mut self, t: f64, cfl: f64) -> Result<()> {
        while self.time < t {
            let remaining = t - self.time;
            let dt = self.stable_dt(cfl);
            if dt >= remaining {
                self.step(remaining)?;
                self.time = t;
            } else {
                self.step(dt)?;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Array3<f64> {
        ndarray::stack(Axis(2), &[self.h.view(), self.hu.view(), self.hv.view()]).expect("equal shapes")
    }
}

/// Dam-break radius drawn for `seed`.
pub fn dam_radius(cfg: &SWEConfig, seed: u64) -> f64 {
    let (lo, hi) = cfg.r_range;
    if lo == hi {
        return lo;
    }
    ChaCha8Rng::seed_from_u64(seed).random_range(lo..hi)
}

/// Trajectory of a radial dam break with a random radius. Output is
/// `n_frames × H × W × 3` holding `(h, hu, hv)` at uniform times over
/// `[0, t_end]`.
pub fn simulate_shallow_water(cfg: &SWEConfig, seed: u64) -> Result<Vec<GridField>> {
    cfg.validate()?;
    let mut solver = ShallowWaterSolver::dam_break(cfg, dam_radius(cfg, seed));
    run_frames(&mut solver, cfg)
}

/// Record `n_frames` uniformly spaced snapshots starting from the current
/// state.
pub fn run_frames(solver: &mut ShallowWaterSolver, cfg: &SWEConfig) -> Result<Vec<GridField>> {
    let extent = Extent::square(-SWE_HALF_WIDTH, SWE_HALF_WIDTH);
    let dt = cfg.frame_dt();
    let mut frames = Vec::with_capacity(cfg.n_frames);
    for k in 0..cfg.n_frames {
        solver.advance_to(k as f64 * dt, cfg.cfl)?;
        frames.push(GridField::new(solver.snapshot(), extent, Some(dt))?);
    }
    Ok(frames)
}
