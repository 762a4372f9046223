//! Acceptance suite. Runs every criterion in order on the calling thread,
//! prints one PASS/FAIL line each and exits non-zero if any failed.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use mno_cli::commands::{CHECKPOINT, DATASET_FILE, LOSS_CURVE};
use mno_cli::verify::{run_property, VerifyOptions};
use mno_cli::{cmd_gen_data, cmd_train, RunConfig};
use mno_core::operator::MixerKind;
use mno_core::pde_data::Task;
use mno_core::train_eval::LrSchedule;

type Outcome = Result<(bool, String), String>;

struct Criterion {
    name: &'static str,
    limit_s: Option<f64>,
    run: fn() -> Outcome,
}

/// Run verify properties and join their verdicts.
fn properties(names: &[&str]) -> Outcome {
    let mut ok = true;
    let mut details = Vec::new();
    for name in names {
        let v = run_property(name, VerifyOptions::default());
        ok &= v.passed();
        details.push(format!("{name}: {} ({})", v.status, v.detail));
    }
    Ok((ok, details.join("; ")))
}

fn zoh_euler() -> Outcome {
    properties(&["zoh_euler_second_order"])
}

fn attention_form() -> Outcome {
    properties(&["attention_form_equivalence"])
}

fn gradients() -> Outcome {
    properties(&["gradient_check"])
}

fn cross_degeneracy() -> Outcome {
    properties(&["cross_s6_degeneracy"])
}

fn scan_round_trip() -> Outcome {
    properties(&["scan_round_trip"])
}

fn darcy_order() -> Outcome {
    properties(&["darcy_convergence_order"])
}

fn shallow_water() -> Outcome {
    properties(&["swe_flat_lake", "swe_mass_conservation", "swe_rotation_symmetry"])
}

fn diffusion_reaction() -> Outcome {
    properties(&["dr_fixed_point"])
}

fn metrics() -> Outcome {
    properties(&["metrics_oracle"])
}

fn spectrum() -> Outcome {
    properties(&["spectrum_parseval", "spectrum_white_noise", "spectrum_checkerboard_constant"])
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Mamba model, 8 Darcy samples at 32², at most 2000 steps.
fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::new(Task::Darcy, 1);
    cfg.data.n_train = 8;
    cfg.data.n_test = 1;
    cfg.data.darcy.grid = 32;
    cfg.model.mixer_kind = MixerKind::MambaBidirectional;
    cfg.model.d_v = 32;
    cfg.model.depth = 3;
    cfg.model.expand = 1;
    cfg.model.lift_hidden = 64;
    cfg.model.proj_hidden = 128;
    cfg.train.steps = 2000;
    cfg.train.batch_size = 4;
    cfg.train.lr = 1e-2;
    cfg.train.warmup_steps = 100;
    cfg.train.schedule = LrSchedule::Cosine;
    cfg
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = overfit_config();
    cmd_gen_data(&cfg, dir.path()).map_err(err)?;
    let report = cmd_train(&cfg, dir.path(), None, None).map_err(err)?;
    let rl2 = report.train.mean.rl2;
    Ok((report.final_step <= 2000 && rl2 <= 1e-2, format!("train RL2 {rl2:.5} after {} steps", report.final_step)))
}

const DIRECTIONAL_SEEDS: [u64; 3] = [1, 2, 3];
const DIRECTIONAL_MIXERS: [MixerKind; 3] =
    [MixerKind::MambaBidirectional, MixerKind::SoftmaxAttention, MixerKind::GalerkinAttention];

fn directional_config(kind: MixerKind, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(Task::Darcy, seed);
    cfg.data.n_train = 900;
    cfg.data.n_test = 100;
    cfg.data.darcy.grid = 32;
    cfg.model.mixer_kind = kind;
    cfg.model.d_v = 32;
    cfg.model.depth = 3;
    cfg.model.expand = 1;
    cfg.train.steps = DIRECTIONAL_STEPS;
    cfg.train.batch_size = 4;
    cfg.train.lr = 3e-3;
    cfg.train.warmup_steps = 100;
    cfg.train.schedule = LrSchedule::Cosine;
    cfg
}

/// Optimizer steps per run, identical for every mixer.
const DIRECTIONAL_STEPS: u64 = 2500;

fn directional() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let data_dir = dir.path().join("data");
    cmd_gen_data(&directional_config(MixerKind::MambaBidirectional, 0), &data_dir).map_err(err)?;
    let data = data_dir.join(DATASET_FILE);
    let mut means = Vec::new();
    let mut raw = Vec::new();
    for kind in DIRECTIONAL_MIXERS {
        let mut sum = 0.0;
        for seed in DIRECTIONAL_SEEDS {
            let out = dir.path().join(format!("{}_{seed}", kind.name()));
            let t = Instant::now();
            let report = cmd_train(&directional_config(kind, seed), &out, Some(&data), None).map_err(err)?;
            let n = report.test.mean.nrmse;
            println!("    {} seed {seed}: test nRMSE {n:.5}, RL2 {:.5} ({:.0} s)", kind.name(), report.test.mean.rl2, t.elapsed().as_secs_f64());
            raw.push(format!("{}#{seed}={n:.4}", kind.name()));
            sum += n;
        }
        means.push(sum / DIRECTIONAL_SEEDS.len() as f64);
    }
    let best_attention = means[1].min(means[2]);
    let ratio = means[0] / best_attention;
    Ok((
        ratio <= 1.1,
        format!(
            "mean test nRMSE mamba {:.5}, softmax {:.5}, galerkin {:.5}; mamba / best attention = {ratio:.3}; runs {}",
            means[0],
            means[1],
            means[2],
            raw.join(" ")
        ),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = RunConfig::new(Task::Darcy, 9);
    cfg.data.n_train = 6;
    cfg.data.n_test = 2;
    cfg.data.darcy.grid = 16;
    cfg.model.d_v = 8;
    cfg.model.depth = 2;
    cfg.train.steps = 20;
    cfg.train.batch_size = 3;
    cfg.train.lr = 5e-3;
    cfg.train.warmup_steps = 5;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let read = |d: &Path, f: &str| fs::read(d.join(f)).map_err(err);
    cmd_gen_data(&cfg, &a).map_err(err)?;
    cmd_train(&cfg, &a, None, None).map_err(err)?;
    cmd_gen_data(&cfg, &b).map_err(err)?;
    cmd_train(&cfg, &b, None, None).map_err(err)?;
    let same_ckpt = read(&a, CHECKPOINT)? == read(&b, CHECKPOINT)?;
    let same_curve = read(&a, LOSS_CURVE)? == read(&b, LOSS_CURVE)?;
    Ok((same_ckpt && same_curve, format!("checkpoints identical: {same_ckpt}, loss curves identical: {same_curve}")))
}

const CRITERIA: [Criterion; 13] = [
    Criterion { name: "zoh_euler_second_order", limit_s: Some(1.0), run: zoh_euler },
    Criterion { name: "attention_form_equivalence", limit_s: Some(5.0), run: attention_form },
    Criterion { name: "gradient_check_all_mixers", limit_s: Some(120.0), run: gradients },
    Criterion { name: "cross_s6_q0_degeneracy", limit_s: None, run: cross_degeneracy },
    Criterion { name: "scan_expand_merge_round_trip", limit_s: None, run: scan_round_trip },
    Criterion { name: "darcy_convergence_order", limit_s: Some(30.0), run: darcy_order },
    Criterion { name: "shallow_water_invariants", limit_s: Some(60.0), run: shallow_water },
    Criterion { name: "diffusion_reaction_fixed_point", limit_s: None, run: diffusion_reaction },
    Criterion { name: "overfit_capacity", limit_s: Some(600.0), run: overfit },
    Criterion { name: "directional_mixer_comparison", limit_s: Some(7200.0), run: directional },
    Criterion { name: "metrics_oracle", limit_s: None, run: metrics },
    Criterion { name: "spectrum_diagnostics", limit_s: None, run: spectrum },
    Criterion { name: "train_determinism", limit_s: None, run: determinism },
];

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for c in CRITERIA.iter().filter(|c| filter.is_empty() || filter.iter().any(|f| c.name.contains(f.as_str()))) {
        ran += 1;
        let start = Instant::now();
        let outcome = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let in_time = c.limit_s.is_none_or(|l| secs <= l);
        let limit = c.limit_s.map(|l| format!(" / limit {l:.0} s")).unwrap_or_default();
        let pass = ok && in_time;
        let tag = if pass { "PASS" } else { "FAIL" };
        let late = if ok && !in_time { " [over time limit]" } else { "" };
        println!("{tag} {:<32} {secs:>8.2} s{limit}{late}  {detail}", c.name);
        if !pass {
            failed.push(c.name);
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
