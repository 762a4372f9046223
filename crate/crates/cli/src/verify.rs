//! Property suite behind `mno verify`.
//!
//! Each property is a self-contained check with a fixed seed. The verdicts
//! are emitted as JSON so scripts can act on individual failures.

use std::f64::consts::PI;
use std::time::Instant;

use mno_core::mixers::{scan_expand, scan_merge, CrossS6BlockParams, MergeReduction, ScanLayout, ScanPath};
use mno_core::operator::{MixerKind, ModelConfig, OperatorModel};
use mno_core::pde_data::{
    decode_sampleset, encode_sampleset, gen_darcy_coefficient, integrate_diffusion_reaction, solve_darcy,
    solve_darcy_with_forcing, build_sampleset, dr_initial_condition, Boundary, DRConfig, DarcyConfig, DataConfig,
    SWEConfig, ShallowWaterSolver,
};
use mno_core::ssm_core::{
    attention_form_scan, discretize_scalar, selective_scan, ContinuousSsm, Discretization, SelectiveScanInputs,
};
use mno_core::train_eval::{
    dft2_unitary, gradient_check, nrmse, rl2, rmse, spectrum_profile, AdamConfig, OptimizerState,
};
use mno_core::{Extent, GridField, ParamStore};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Run the gradient check against a tape whose scan adjoint is wrong.
    pub corrupt_adjoint: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub property: String,
    pub status: &'static str,
    pub detail: String,
    pub seconds: f64,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.status == "pass"
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub properties: Vec<Verdict>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&str> {
        self.properties.iter().filter(|v| !v.passed()).map(|v| v.property.as_str()).collect()
    }
}

type Check = mno_core::Result<(bool, String)>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

/// Smallest log-log slope of the ZOH−Euler gap in `Ā` and `B̄` over the
/// rate grid.
pub fn zoh_euler_min_slope() -> f64 {
    let rates: [f64; 5] = [-0.1, -0.5, -1.0, -2.0, -4.0];
    let steps: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
    let mut worst = f64::INFINITY;
    for a in rates {
        let mut gap_a = Vec::new();
        let mut gap_b = Vec::new();
        for d in steps {
            let (za, zb) = discretize_scalar(a, 1.0, d, Discretization::Zoh);
            let (ea, eb) = discretize_scalar(a, 1.0, d, Discretization::Euler);
            gap_a.push((za - ea).abs());
            gap_b.push((zb - eb).abs());
        }
        worst = worst.min(loglog_slope(&steps, &gap_a)).min(loglog_slope(&steps, &gap_b));
    }
    worst
}

fn prop_zoh_euler() -> Check {
    let s = zoh_euler_min_slope();
    Ok((s >= 1.9, format!("min slope {s:.4}")))
}

/// Largest relative gap between the attention-form final state and the
/// recurrent scan over `trials` random instances.
pub fn attention_form_max_gap(trials: usize, seed: u64) -> mno_core::Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let len = r.random_range(1..=64);
        let n = r.random_range(1..=16);
        let ch = r.random_range(1..=4);
        let a = rand_mat(&mut r, ch, n).mapv(|v| -(v.abs() * 2.0 + 0.05));
        let ssm = ContinuousSsm::new(a, Array2::zeros((ch, n)), Array2::zeros((ch, n)), Array1::zeros(ch))?;
        let u = rand_mat(&mut r, len, ch);
        let delta = rand_mat(&mut r, len, ch).mapv(|v| v.abs() * 0.1 + 1e-3);
        let b = rand_mat(&mut r, len, n);
        let c = rand_mat(&mut r, len, n);
        let h0 = rand_mat(&mut r, n, ch);
        let inputs = SelectiveScanInputs::with_state(u, delta, b, c, h0)?;
        let rec = selective_scan(&inputs, &ssm, Discretization::SimplifiedZoh)?.h_final;
        let att = attention_form_scan(&inputs, &ssm)?;
        let scale = rec.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let gap = (&rec - &att).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
        worst = worst.max(gap);
    }
    Ok(worst)
}

fn prop_attention_form() -> Check {
    let g = attention_form_max_gap(100, 11)?;
    Ok((g <= 1e-10, format!("max relative gap {g:e} over 100 instances")))
}

/// Small full stack used by the gradient checks.
pub fn gradcheck_model(kind: MixerKind) -> mno_core::Result<(OperatorModel<f64>, GridField)> {
    let cfg = ModelConfig {
        in_channels: 2,
        out_channels: 1,
        d_v: 8,
        depth: 2,
        mixer_kind: kind,
        d_state: 4,
        lift_hidden: 8,
        proj_hidden: 8,
        precision: mno_core::operator::Precision::F64,
        ..ModelConfig::default()
    };
    let model = OperatorModel::<f64>::new(cfg, 5)?;
    let mut r = rng(6);
    let input = GridField::new(Array3::from_shape_fn((8, 8, 2), |_| r.random_range(-1.0..1.0)), Extent::UNIT, None)?;
    Ok((model, input))
}

fn prop_gradient(fault: bool) -> Check {
    let mut details = Vec::new();
    let mut ok = true;
    for kind in MixerKind::ALL {
        let (model, input) = gradcheck_model(kind)?;
        let rep = gradient_check(&model, &input, GRADIENT_TOLERANCE, fault)?;
        ok &= rep.passed;
        details.push(format!("{}: {:.2e} ({} params, worst {})", kind.name(), rep.max_rel_err, rep.checked, rep.worst));
    }
    Ok((ok, details.join("; ")))
}

fn prop_cross_degeneracy() -> Check {
    let mut r = rng(21);
    let mut store = ParamStore::<f64>::new();
    let block = CrossS6BlockParams::init(&mut store, "x", 4, 8, 4, 0.0, &mut r)?;
    let x = rand_mat(&mut r, 12, 4);
    let xp = rand_mat(&mut r, 12, 4);
    let cross = block.apply(&store, &x, &xp)?;
    let plain = block.as_s6().apply(&store, &x)?;
    let same = cross.iter().zip(plain.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, "q=0 cross-S6 vs S6, bitwise".into()))
}

/// Random grids up to 64×64 pushed through expand → merge with identity
/// processing. Returns the number of exact round trips.
pub fn scan_round_trips(trials: usize, seed: u64) -> mno_core::Result<usize> {
    let mut r = rng(seed);
    let mut exact = 0;
    for t in 0..trials {
        let h = r.random_range(1..=64);
        let w = r.random_range(1..=64);
        let c = r.random_range(1..=3);
        let field = GridField::new(Array3::from_shape_fn((h, w, c), |_| r.random_range(-1.0..1.0)), Extent::UNIT, None)?;
        let mut custom: Vec<usize> = (0..h * w).collect();
        custom.reverse();
        custom.rotate_left(t % (h * w));
        let layout = ScanLayout::new(
            h,
            w,
            vec![
                ScanPath::RowMajor { reverse: false },
                ScanPath::RowMajor { reverse: true },
                ScanPath::ColMajor { reverse: false },
                ScanPath::Custom(custom),
            ],
            MergeReduction::Mean,
        )?;
        let back = scan_merge(&scan_expand(&field, &layout)?, &layout)?;
        if back.data == field.data {
            exact += 1;
        }
    }
    Ok(exact)
}

fn prop_scan_round_trip() -> Check {
    let n = scan_round_trips(50, 31)?;
    Ok((n == 50, format!("{n}/50 exact")))
}

/// Max-error convergence order of the Darcy solver on the manufactured
/// solution `sin(πx) sin(πy)`.
pub fn darcy_convergence_order(grids: &[usize]) -> mno_core::Result<(f64, Vec<f64>)> {
    let mut hs = Vec::new();
    let mut errs = Vec::new();
    for &n in grids {
        let a = GridField::scalar(Array2::ones((n, n)), Extent::UNIT)?;
        let h = 1.0 / (n - 1) as f64;
        let exact = |i: usize, j: usize| (PI * j as f64 * h).sin() * (PI * i as f64 * h).sin();
        let f = Array2::from_shape_fn((n, n), |(i, j)| 2.0 * PI * PI * exact(i, j));
        let u = solve_darcy_with_forcing(&a, &f)?;
        let err = u.channel(0).indexed_iter().map(|((i, j), v)| (v - exact(i, j)).abs()).fold(0.0, f64::max);
        hs.push(h);
        errs.push(err);
    }
    Ok((loglog_slope(&hs, &errs), errs))
}

fn prop_darcy_order() -> Check {
    let (order, errs) = darcy_convergence_order(&[17, 33, 65])?;
    Ok(((1.8..=2.2).contains(&order), format!("order {order:.4}, errors {}", errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(" "))))
}

fn prop_darcy_max_principle() -> Check {
    let cfg = DarcyConfig { grid: 24, ..Default::default() };
    let mut min = f64::INFINITY;
    for seed in 0..4 {
        let u = solve_darcy(&gen_darcy_coefficient(&cfg, seed)?, 1.0)?;
        min = min.min(u.data.iter().copied().fold(f64::INFINITY, f64::min));
    }
    Ok((min >= 0.0, format!("min u = {min:e}")))
}

fn prop_flat_lake() -> Check {
    let mut s = ShallowWaterSolver::new(Array2::ones((16, 16)), 5.0 / 16.0, 9.81, Boundary::Outflow);
    for _ in 0..100 {
        let dt = s.stable_dt(0.45);
        s.step(dt)?;
    }
    let exact = s.h.iter().all(|&v| v == 1.0) && s.hu.iter().chain(s.hv.iter()).all(|&v| v == 0.0);
    Ok((exact, "100 steps of a resting lake".into()))
}

/// Relative mass drift after 100 steps with reflective walls.
pub fn swe_mass_drift(grid: usize, r: f64) -> mno_core::Result<f64> {
    let cfg = SWEConfig { grid, boundary: Boundary::Reflective, ..Default::default() };
    let mut s = ShallowWaterSolver::dam_break(&cfg, r);
    let m0 = s.total_mass();
    for _ in 0..100 {
        let dt = s.stable_dt(cfg.cfl);
        s.step(dt)?;
    }
    Ok(((s.total_mass() - m0) / m0).abs())
}

fn prop_swe_mass() -> Check {
    let d = swe_mass_drift(32, 0.5)?;
    Ok((d <= 1e-10, format!("relative drift {d:e}")))
}

/// Largest `|h(i, j) − h(j, n−1−i)|` at `t_end` for the centred dam break.
pub fn swe_rotation_gap(grid: usize) -> mno_core::Result<f64> {
    let cfg = SWEConfig { grid, ..Default::default() };
    let mut s = ShallowWaterSolver::dam_break(&cfg, 0.5);
    s.advance_to(cfg.t_end, cfg.cfl)?;
    let n = grid;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((s.h[[i, j]] - s.h[[j, n - 1 - i]]).abs());
        }
    }
    Ok(worst)
}

fn prop_swe_rotation() -> Check {
    let g = swe_rotation_gap(64)?;
    Ok((g <= 1e-6, format!("max gap {g:e} at 64²")))
}

/// Largest deviation from the uniform fixed point over the full horizon.
pub fn dr_fixed_point_drift(grid: usize) -> mno_core::Result<f64> {
    let cfg = DRConfig { grid, ..Default::default() };
    let star = -cfg.k.cbrt();
    let u = Array2::from_elem((grid, grid), star);
    let frames = integrate_diffusion_reaction(&cfg, u.clone(), u)?;
    Ok(frames.iter().flat_map(|f| f.data.iter()).map(|v| (v - star).abs()).fold(0.0, f64::max))
}

fn prop_dr_fixed_point() -> Check {
    let d = dr_fixed_point_drift(32)?;
    Ok((d <= 1e-6, format!("drift {d:e}")))
}

fn prop_dr_mean() -> Check {
    let cfg = DRConfig { grid: 32, reactions: false, ..Default::default() };
    let (u, v) = dr_initial_condition(&cfg, 2);
    let (u, v) = (u + 0.25, v + 0.25);
    let m0 = u.mean().unwrap_or(0.0);
    let frames = integrate_diffusion_reaction(&cfg, u, v)?;
    let m1 = frames.last().map(|f| f.channel(0).mean().unwrap_or(0.0)).unwrap_or(0.0);
    let d = ((m1 - m0) / m0).abs();
    Ok((d <= 1e-10, format!("relative mean drift {d:e}")))
}

/// Largest deviation of the metric functions from a direct computation
/// over `trials` random pairs, plus the homogeneity checks.
pub fn metrics_oracle_gap(trials: usize, seed: u64) -> mno_core::Result<(f64, bool)> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut homogeneous = true;
    for _ in 0..trials {
        let n = r.random_range(1..=64);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut se = 0.0;
        let mut tt = 0.0;
        for k in 0..n {
            se += (p[k] - t[k]) * (p[k] - t[k]);
            tt += t[k] * t[k];
        }
        let o_rmse = (se / n as f64).sqrt();
        let o_nrmse = o_rmse / (tt / n as f64).sqrt();
        let o_rl2 = se.sqrt() / tt.sqrt();
        let got = [rmse(&p, &t)?, nrmse(&p, &t)?, rl2(&p, &t)?];
        for (g, o) in got.iter().zip([o_rmse, o_nrmse, o_rl2]) {
            worst = worst.max((g - o).abs() / o.abs().max(1.0));
        }
        let c = 2f64.powi(r.random_range(-4..=4)) * if r.random_bool(0.5) { -1.0 } else { 1.0 };
        let (cp, ct): (Vec<f64>, Vec<f64>) = (p.iter().map(|v| v * c).collect(), t.iter().map(|v| v * c).collect());
        homogeneous &= rl2(&cp, &ct)? == got[2] && nrmse(&cp, &ct)? == got[1] && rmse(&cp, &ct)? == got[0] * c.abs();
    }
    Ok((worst, homogeneous))
}

fn prop_metrics() -> Check {
    let (gap, homog) = metrics_oracle_gap(1000, 41)?;
    Ok((gap <= 1e-12 && homog, format!("oracle gap {gap:e}, homogeneity {homog}")))
}

fn prop_parseval() -> Check {
    let mut r = rng(51);
    let mut worst = 0.0f64;
    for n in [8, 15, 32] {
        let x = rand_mat(&mut r, n, n);
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spec: f64 = dft2_unitary(&x).iter().map(|c| c.norm_sqr()).sum();
        worst = worst.max((spec - energy).abs() / energy);
    }
    Ok((worst <= 1e-10, format!("relative gap {worst:e}")))
}

/// Mean and worst Δ log amplitude of white-noise maps.
pub fn white_noise_delta(trials: usize, seed: u64) -> mno_core::Result<(f64, f64)> {
    let mut r = rng(seed);
    let mut sum = 0.0;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let f = GridField::new(
            Array3::from_shape_fn((32, 32, 16), |_| r.sample::<f64, _>(rand_distr::StandardNormal)),
            Extent::UNIT,
            None,
        )?;
        let d = spectrum_profile(&f)?.delta_log_amplitude;
        sum += d;
        worst = worst.max(d.abs());
    }
    Ok((sum / trials as f64, worst))
}

fn prop_white_noise() -> Check {
    let (mean, worst) = white_noise_delta(64, 61)?;
    Ok((mean.abs() <= 0.15, format!("mean Δ {mean:.4}, worst single {worst:.3}")))
}

fn prop_spectrum_shapes() -> Check {
    let n = 16;
    let checker = GridField::scalar(Array2::from_shape_fn((n, n), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 }), Extent::UNIT)?;
    let constant = GridField::scalar(Array2::from_elem((n, n), 3.0), Extent::UNIT)?;
    let dc = spectrum_profile(&checker)?.delta_log_amplitude;
    let dk = spectrum_profile(&constant)?.delta_log_amplitude;
    Ok((dc > 0.0 && dk < 0.0, format!("checkerboard Δ {dc:.2}, constant Δ {dk:.2}")))
}

fn prop_identity_spectrum() -> Check {
    let cfg = ModelConfig {
        in_channels: 4,
        out_channels: 4,
        d_v: 4,
        depth: 2,
        coord_dim: 0,
        lift_hidden: 0,
        proj_hidden: 0,
        d_state: 2,
        ..ModelConfig::default()
    };
    let mut model = OperatorModel::<f64>::new(cfg, 1)?;
    model.pin_identity()?;
    let mut r = rng(71);
    let input = GridField::new(Array3::from_shape_fn((16, 16, 4), |_| r.random_range(-1.0..1.0)), Extent::UNIT, None)?;
    let base = spectrum_profile(&input)?.delta_log_amplitude;
    let (_, taps) = model.forward_with_taps(&input)?;
    let mut worst = 0.0f64;
    for t in &taps {
        worst = worst.max((spectrum_profile(&t.field)?.delta_log_amplitude - base).abs());
    }
    Ok((worst <= 1e-9 && taps.len() == 4, format!("{} taps, max deviation {worst:e}", taps.len())))
}

fn prop_adam() -> Check {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("theta", Array2::from_elem((1, 1), 1.0));
    let mut opt = OptimizerState::new(&store, AdamConfig::default());
    // gradient of ½θ² is θ
    opt.adam_step(&mut store, &[Array2::from_elem((1, 1), 1.0)], 0.1)?;
    let theta = store.get(id)[[0, 0]];
    // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + ε)
    let expect = 1.0 - 0.1 / (1.0 + AdamConfig::default().eps);
    Ok(((theta - expect).abs() <= 1e-15 && (theta - 0.9).abs() <= 1e-8, format!("θ after one step {theta}")))
}

fn prop_dataset_round_trip() -> Check {
    let cfg = DataConfig { n_train: 2, n_test: 1, seed: 3, darcy: DarcyConfig { grid: 8, ..Default::default() }, ..Default::default() };
    let set = build_sampleset(&cfg)?;
    let bytes = encode_sampleset(&set)?;
    let (prov, samples) = decode_sampleset(&bytes)?;
    let again = encode_sampleset(&mno_core::pde_data::SampleSet { samples, split: set.split.clone(), provenance: prov })?;
    Ok((bytes == again, format!("{} bytes", bytes.len())))
}

/// Names of every property, in run order.
pub const PROPERTIES: [&str; 19] = [
    "zoh_euler_second_order",
    "attention_form_equivalence",
    "gradient_check",
    "cross_s6_degeneracy",
    "scan_round_trip",
    "darcy_convergence_order",
    "darcy_maximum_principle",
    "swe_flat_lake",
    "swe_mass_conservation",
    "swe_rotation_symmetry",
    "dr_fixed_point",
    "dr_diffusion_mean_conservation",
    "metrics_oracle",
    "spectrum_parseval",
    "spectrum_white_noise",
    "spectrum_checkerboard_constant",
    "spectrum_identity_model",
    "adam_first_step",
    "dataset_round_trip",
];

/// Run one named property.
pub fn run_property(name: &str, opts: VerifyOptions) -> Verdict {
    let start = Instant::now();
    let res = match name {
        "zoh_euler_second_order" => prop_zoh_euler(),
        "attention_form_equivalence" => prop_attention_form(),
        "gradient_check" => prop_gradient(opts.corrupt_adjoint),
        "cross_s6_degeneracy" => prop_cross_degeneracy(),
        "scan_round_trip" => prop_scan_round_trip(),
        "darcy_convergence_order" => prop_darcy_order(),
        "darcy_maximum_principle" => prop_darcy_max_principle(),
        "swe_flat_lake" => prop_flat_lake(),
        "swe_mass_conservation" => prop_swe_mass(),
        "swe_rotation_symmetry" => prop_swe_rotation(),
        "dr_fixed_point" => prop_dr_fixed_point(),
        "dr_diffusion_mean_conservation" => prop_dr_mean(),
        "metrics_oracle" => prop_metrics(),
        "spectrum_parseval" => prop_parseval(),
        "spectrum_white_noise" => prop_white_noise(),
        "spectrum_checkerboard_constant" => prop_spectrum_shapes(),
        "spectrum_identity_model" => prop_identity_spectrum(),
        "adam_first_step" => prop_adam(),
        "dataset_round_trip" => prop_dataset_round_trip(),
        other => Err(mno_core::MnoError::InvalidArgument(format!("unknown property {other}"))),
    };
    let (ok, detail) = res.unwrap_or_else(|e| (false, format!("error: {e}")));
    Verdict {
        property: name.to_string(),
        status: if ok { "pass" } else { "fail" },
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Run every property and collect the verdicts.
pub fn run_suite(opts: VerifyOptions) -> VerifyReport {
    let out: Vec<Verdict> = PROPERTIES.iter().map(|name| run_property(name, opts)).collect();
    VerifyReport { passed: out.iter().all(Verdict::passed), properties: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_at_least_twelve_distinct_properties() {
        let mut names = PROPERTIES.to_vec();
        names.sort_unstable();
        names.dedup();
        assert!(names.len() >= 12 && names.len() == PROPERTIES.len());
    }

    #[test]
    fn cheap_properties_pass() {
        for name in ["zoh_euler_second_order", "cross_s6_degeneracy", "adam_first_step", "spectrum_checkerboard_constant"] {
            let v = run_property(name, VerifyOptions::default());
            assert!(v.passed(), "{name}: {}", v.detail);
        }
    }

    #[test]
    fn unknown_property_fails() {
        assert!(!run_property("no_such_property", VerifyOptions::default()).passed());
    }
}
