//! Two-component diffusion-reaction system on `[−1, 1]²` with no-flux
//! boundaries, integrated by explicit substeps.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grf::filtered_noise;
use crate::error::{MnoError, Result};
use crate::field::{Extent, GridField};

/// Magnitude of `u` or `v` treated as blow-up.
pub const BLOW_UP: f64 = 10.0;
/// Wavenumber cutoff of the random initial condition.
pub const IC_CUTOFF: f64 = 8.0;
pub const IC_AMPLITUDE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DRConfig {
    pub grid: usize,
    pub t_end: f64,
    pub n_frames: usize,
    pub d_u: f64,
    pub d_v: f64,
    pub k: f64,
    /// Upper bound on the substep independent of the diffusion limit.
    pub max_substep: f64,
    pub reactions: bool,
}

impl Default for DRConfig {
    fn default() -> Self {
        DRConfig {
            grid: 32,
            t_end: 5.0,
            n_frames: 101,
            d_u: 1e-3,
            d_v: 5e-3,
            k: 5e-3,
            max_substep: 5e-3,
            reactions: true,
        }
    }
}

impl DRConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(MnoError::invalid("grid: at least 4 cells per side"));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(MnoError::invalid("t_end: must be positive"));
        }
        if self.n_frames < 2 {
            return Err(MnoError::invalid("n_frames: at least 2"));
        }
        if !(self.d_u >= 0.0 && self.d_v >= 0.0 && self.d_u.is_finite() && self.d_v.is_finite()) {
            return Err(MnoError::invalid("d_u, d_v: must be non-negative"));
        }
        if !self.k.is_finite() {
            return Err(MnoError::invalid("k: must be finite"));
        }
        if !(self.max_substep > 0.0) {
            return Err(MnoError::invalid("max_substep: must be positive"));
        }
        Ok(())
    }

    pub fn cell(&self) -> f64 {
        2.0 / self.grid as f64
    }

    pub fn frame_dt(&self) -> f64 {
        self.t_end / (self.n_frames - 1) as f64
    }

    /// Explicit diffusion stability bound `cell² / (4 max(d_u, d_v))`.
    pub fn diffusion_limit(&self) -> f64 {
        let d = self.d_u.max(self.d_v);
        if d > 0.0 {
            self.cell().powi(2) / (4.0 * d)
        } else {
            f64::INFINITY
        }
    }

    /// Substeps per output frame and their length.
    pub fn substeps(&self) -> (usize, f64) {
        let frame = self.frame_dt();
        let bound = self.diffusion_limit().min(self.max_substep);
        let n = (frame / bound).ceil().max(1.0) as usize;
        (n, frame / n as f64)
    }
}

/// `R_u(u, v) = u − u³ − k − v`.
pub fn reaction_u(u: f64, v: f64, k: f64) -> f64 {
    u - u * u * u - k - v
}

/// `R_v(u, v) = u − v`.
pub fn reaction_v(u: f64, v: f64) -> f64 {
    u - v
}

/// Five-point Laplacian with mirrored ghost cells (zero normal flux).
fn laplacian(f: &Array2<f64>, inv_h2: f64, out: &mut Array2<f64>) {
    let (ny, nx) = f.dim();
    for i in 0..ny {
        for j in 0..nx {
            let c = f[[i, j]];
            let w = f[[i, j.saturating_sub(1)]];
            let e = f[[i, (j + 1).min(nx - 1)]];
            let s = f[[i.saturating_sub(1), j]];
            let n = f[[(i + 1).min(ny - 1), j]];
            out[[i, j]] = ((w - c) + (e - c) + (s - c) + (n - c)) * inv_h2;
        }
    }
}

/// Random smooth initial condition: band-limited noise scaled to peak
/// magnitude `IC_AMPLITUDE`.
pub fn dr_initial_condition(cfg: &DRConfig, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let f = filtered_noise(&mut rng, cfg.grid, |kx, ky| if kx * kx + ky * ky <= IC_CUTOFF * IC_CUTOFF { 1.0 } else { 0.0 });
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            f * (IC_AMPLITUDE / peak)
        } else {
            f
        }
    };
    let u = draw();
    let v = draw();
    (u, v)
}

/// Integrate from `(u, v)` and return `n_frames` snapshots `(u, v)`,
/// the first being the initial state.
pub fn integrate_diffusion_reaction(cfg: &DRConfig, mut u: Array2<f64>, mut v: Array2<f64>) -> Result<Vec<GridField>> {
    cfg.validate()?;
    if u.dim() != (cfg.grid, cfg.grid) || v.dim() != u.dim() {
        return Err(MnoError::invalid("initial condition shape differs from the grid"));
    }
    let extent = Extent::square(-1.0, 1.0);
    let frame_dt = cfg.frame_dt();
    let (n_sub, dt) = cfg.substeps();
    let inv_h2 = 1.0 / cfg.cell().powi(2);
    let mut lu = Array2::zeros(u.dim());
    let mut lv = Array2::zeros(u.dim());
    let snap = |u: &Array2<f64>, v: &Array2<f64>| -> Result<GridField> {
        let data: Array3<f64> = ndarray::stack(Axis(2), &[u.view(), v.view()]).expect("equal shapes");
        GridField::new(data, extent, Some(frame_dt))
    };
    let mut frames = vec![snap(&u, &v)?];
    for frame in 1..cfg.n_frames {
        for sub in 0..n_sub {
            laplacian(&u, inv_h2, &mut lu);
            laplacian(&v, inv_h2, &mut lv);
            ndarray::Zip::from(&mut u).and(&mut v).and(&lu).and(&lv).for_each(|u, v, &lu, &lv| {
                let (u0, v0) = (*u, *v);
                let (mut du, mut dv) = (cfg.d_u * lu, cfg.d_v * lv);
                if cfg.reactions {
                    du += reaction_u(u0, v0, cfg.k);
                    dv += reaction_v(u0, v0);
                }
                *u = u0 + dt * du;
                *v = v0 + dt * dv;
            });
            if u.iter().chain(v.iter()).any(|x| !(x.abs() <= BLOW_UP)) {
                return Err(MnoError::Instability(format!(
                    "|u| or |v| exceeded {BLOW_UP} in frame {frame} substep {sub}; step {dt:e} vs bound cell²/(4·max(d_u,d_v)) = {:e}",
                    cfg.diffusion_limit()
                )));
            }
        }
        frames.push(snap(&u, &v)?);
    }
    Ok(frames)
}

/// Trajectory from a random initial condition drawn for `seed`.
pub fn simulate_diffusion_reaction(cfg: &DRConfig, seed: u64) -> Result<Vec<GridField>> {
    cfg.validate()?;
    let (u, v) = dr_initial_condition(cfg, seed);
    integrate_diffusion_reaction(cfg, u, v)
}
