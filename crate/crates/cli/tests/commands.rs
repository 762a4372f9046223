use std::fs;
use std::path::Path;
use std::process::Command;

use mno_cli::commands::{spectrum_of, CHECKPOINT, DATASET_FILE, INIT_CHECKPOINT, LOSS_CURVE};
use mno_cli::{cmd_eval, cmd_gen_data, cmd_spectrum, cmd_train, RunConfig, SplitSel};
use mno_core::operator::OperatorModel;
use mno_core::pde_data::{read_sampleset, split_path, Task};
use mno_core::train_eval::{spectrum_profile, MetricsReport, SampleMetrics, SpectrumProfile};

fn mno() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mno"))
}

fn small(task: Task, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(task, seed);
    cfg.data.n_train = 4;
    cfg.data.n_test = 2;
    cfg.data.darcy.grid = 8;
    cfg.data.dr2d.grid = 8;
    cfg.data.dr2d.n_frames = 12;
    cfg.data.dr2d.t_end = 0.5;
    cfg.model.d_v = 4;
    cfg.model.depth = 2;
    cfg.model.d_state = 2;
    cfg.model.lift_hidden = 8;
    cfg.model.proj_hidden = 8;
    cfg.train.steps = 6;
    cfg.train.batch_size = 2;
    cfg.train.lr = 1e-2;
    cfg.train.warmup_steps = 2;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Darcy, 7);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_gen_data(&cfg, &a).unwrap();
    cmd_gen_data(&cfg, &b).unwrap();
    for f in [DATASET_FILE, "provenance.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let set = a.join(DATASET_FILE);
    assert_eq!(fs::read(split_path(&set)).unwrap(), fs::read(split_path(&b.join(DATASET_FILE))).unwrap());
    assert_eq!(read_sampleset(&set).unwrap().samples.len(), 6);
}

#[test]
fn binary_gen_data_matches_library_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Darcy, 7);
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("bin");
    let st = mno().args(["gen-data", "--threads", "1", "--config"]).arg(&path).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    cmd_gen_data(&cfg, &dir.path().join("lib")).unwrap();
    assert_eq!(fs::read(out.join(DATASET_FILE)).unwrap(), fs::read(dir.path().join("lib").join(DATASET_FILE)).unwrap());

    let other = dir.path().join("seed8");
    let st = mno().args(["gen-data", "--seed", "8", "--config"]).arg(&path).arg("--out").arg(&other).status().unwrap();
    assert!(st.success());
    assert_ne!(fs::read(out.join(DATASET_FILE)).unwrap(), fs::read(other.join(DATASET_FILE)).unwrap());
}

#[test]
fn invalid_cfl_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"version":1,"task":"sw2d","seed":1,"data":{"sw2d":{"cfl":1.5}}}"#).unwrap();
    let out = mno().args(["gen-data", "--config"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cfl"));
}

#[test]
fn zero_threads_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small(Task::Darcy, 1));
    let out = mno().args(["gen-data", "--threads", "0", "--config"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_learning_rate_checkpoint_equals_init() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Task::Darcy, 3);
    cfg.train.lr = 0.0;
    cmd_gen_data(&cfg, dir.path()).unwrap();
    cmd_train(&cfg, dir.path(), None, None).unwrap();
    let (init, _, _) = OperatorModel::<f64>::load(&dir.path().join(INIT_CHECKPOINT)).unwrap();
    let (last, step, _) = OperatorModel::<f64>::load(&dir.path().join(CHECKPOINT)).unwrap();
    assert_eq!(step, 6);
    for ((_, a), (_, b)) in init.params.iter().zip(last.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn resume_continues_the_run_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Darcy, 5);
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    let set = data.join(DATASET_FILE);

    let full = dir.path().join("full");
    cmd_train(&cfg, &full, Some(&set), None).unwrap();

    let split = dir.path().join("split");
    let half = RunConfig { train: mno_core::train_eval::TrainConfig { steps: 3, ..cfg.train.clone() }, ..cfg.clone() };
    cmd_train(&half, &split, Some(&set), None).unwrap();
    let ckpt = split.join(CHECKPOINT);
    let report = cmd_train(&cfg, &split, Some(&set), Some(&ckpt)).unwrap();
    assert_eq!(report.final_step, 6);

    let curve = fs::read_to_string(split.join(LOSS_CURVE)).unwrap();
    let steps: Vec<u64> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
    assert_eq!(curve, fs::read_to_string(full.join(LOSS_CURVE)).unwrap());
    assert_eq!(fs::read(full.join(CHECKPOINT)).unwrap(), fs::read(&ckpt).unwrap());
}

#[test]
fn divergence_exits_4_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Task::Darcy, 2);
    cfg.train.lr = 1e30;
    cfg.train.warmup_steps = 0;
    cfg.train.checkpoint_every = 1;
    cfg.train.steps = 20;
    cmd_gen_data(&cfg, dir.path()).unwrap();
    let err = cmd_train(&cfg, dir.path(), None, None).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    let curve = fs::read_to_string(dir.path().join(LOSS_CURVE)).unwrap();
    let logged = curve.lines().count() as u64 - 1;
    let (_, step, _) = OperatorModel::<f64>::load(&dir.path().join(CHECKPOINT)).unwrap();
    assert_eq!(step, logged, "checkpoint step vs logged steps");
    assert!(step < cfg.train.steps);
}

#[test]
fn eval_on_train_split_reproduces_train_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Darcy, 4);
    cmd_gen_data(&cfg, dir.path()).unwrap();
    let report = cmd_train(&cfg, dir.path(), None, None).unwrap();
    let eval = cmd_eval(&dir.path().join(CHECKPOINT), &dir.path().join(DATASET_FILE), SplitSel::Train, &dir.path().join("eval")).unwrap();
    assert_eq!(eval.sample_ids, report.train.sample_ids);
    for (a, b) in eval.per_sample.iter().zip(&report.train.per_sample) {
        assert!((a.rmse - b.rmse).abs() <= 1e-6 && (a.nrmse - b.nrmse).abs() <= 1e-6 && (a.rl2 - b.rl2).abs() <= 1e-6);
    }
    assert!(dir.path().join("eval").join("eval_metrics.csv").exists());
}

#[test]
fn truth_as_prediction_gives_zero_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Darcy, 4);
    cmd_gen_data(&cfg, dir.path()).unwrap();
    let set = read_sampleset(&dir.path().join(DATASET_FILE)).unwrap();
    let per: Vec<SampleMetrics> = set.samples.iter().map(|s| SampleMetrics::of(&s.target, &s.target).unwrap()).collect();
    let report = MetricsReport::new("darcy", "fixture", set.samples.iter().map(|s| s.id).collect(), per).unwrap();
    assert!(report.per_sample.iter().all(|m| m.rmse == 0.0 && m.nrmse == 0.0 && m.rl2 == 0.0));
    assert_eq!((report.mean.rmse, report.mean.nrmse, report.mean.rl2), (0.0, 0.0, 0.0));
}

#[test]
fn missing_checkpoint_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mno1");
    let out = mno()
        .args(["eval", "--checkpoint"])
        .arg(&missing)
        .arg("--data")
        .arg(dir.path().join("d.mnod"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.mno1"));
}

#[test]
fn shape_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Darcy, 4);
    cmd_gen_data(&cfg, dir.path()).unwrap();
    cmd_train(&cfg, dir.path(), None, None).unwrap();
    let other = dir.path().join("dr");
    cmd_gen_data(&small(Task::Dr2d, 4), &other).unwrap();
    let err = cmd_eval(&dir.path().join(CHECKPOINT), &other.join(DATASET_FILE), SplitSel::Test, &other).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let err = cmd_spectrum(&dir.path().join(CHECKPOINT), &other.join(DATASET_FILE), 1, &other).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

fn assert_close(a: &SpectrumProfile, b: &SpectrumProfile) {
    assert_eq!(a.frequencies, b.frequencies);
    assert!(a.log_amplitude.iter().zip(&b.log_amplitude).all(|(x, y)| (x - y).abs() <= 1e-12));
    assert!((a.delta_log_amplitude - b.delta_log_amplitude).abs() <= 1e-12);
}

#[test]
fn spectrum_of_one_sample_matches_direct_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Darcy, 6);
    cmd_gen_data(&cfg, dir.path()).unwrap();
    cmd_train(&cfg, dir.path(), None, None).unwrap();
    let ckpt = dir.path().join(CHECKPOINT);
    let report = cmd_spectrum(&ckpt, &dir.path().join(DATASET_FILE), 1, &dir.path().join("spec")).unwrap();
    let set = read_sampleset(&dir.path().join(DATASET_FILE)).unwrap();
    let input = &set.test_pairs()[0].0;
    assert_close(&report.input, &spectrum_profile(input).unwrap());
    let (model, _, _) = OperatorModel::<f64>::load(&ckpt).unwrap();
    let (_, taps) = model.forward_with_taps(input).unwrap();
    assert_eq!(report.profiles.len(), taps.len());
    for (p, t) in report.profiles.iter().zip(&taps) {
        assert_close(p, &spectrum_profile(&t.field).unwrap());
    }
    assert!(dir.path().join("spec").join("spectrum_depth.csv").exists());
    assert!(dir.path().join("spec").join("spectrum_tap00.csv").exists());
}

#[test]
fn spectrum_average_is_order_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Task::Darcy, 6);
    cfg.data.n_test = 3;
    cmd_gen_data(&cfg, dir.path()).unwrap();
    cmd_train(&cfg, dir.path(), None, None).unwrap();
    let (model, _, _) = OperatorModel::<f64>::load(&dir.path().join(CHECKPOINT)).unwrap();
    let set = read_sampleset(&dir.path().join(DATASET_FILE)).unwrap();
    let xs: Vec<_> = set.test_pairs().into_iter().map(|p| p.0).collect();
    let rev: Vec<_> = xs.iter().rev().cloned().collect();
    let (a, b) = (spectrum_of(&model, &xs).unwrap(), spectrum_of(&model, &rev).unwrap());
    for (p, q) in a.depth.iter().zip(&b.depth) {
        assert!((p.delta_log_amplitude - q.delta_log_amplitude).abs() <= 1e-12);
    }
    for (p, q) in a.profiles.iter().zip(&b.profiles) {
        assert!(p.log_amplitude.iter().zip(&q.log_amplitude).all(|(x, y)| (x - y).abs() <= 1e-12));
    }
}
