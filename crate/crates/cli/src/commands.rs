//! The `gen-data`, `train`, `eval` and `spectrum` commands.

use std::fs;
use std::path::{Path, PathBuf};

use mno_core::operator::checkpoint::canonical_json;
use mno_core::operator::{Normalizer, OperatorModel, Precision};
use mno_core::pde_data::{build_sampleset, read_sampleset, write_sampleset, SampleSet};
use mno_core::train_eval::{
    average_profiles, config_hash, depth_csv, depth_profile, evaluate, fit, fresh_optimizer, loss_curve_csv,
    spectrum_profile, DepthPoint, LossPoint, MetricsReport, OptimizerState, SpectrumProfile,
};
use mno_core::{GridField, Real};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const DATASET_FILE: &str = "dataset.mnod";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const INIT_CHECKPOINT: &str = "init.mno1";
pub const CHECKPOINT: &str = "checkpoint.mno1";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const TEST_METRICS: &str = "metrics";
pub const TRAIN_METRICS: &str = "train_metrics";
pub const EVAL_METRICS: &str = "eval_metrics";

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))
}

/// Write via a temporary sibling so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::config(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_report(out: &Path, stem: &str, report: &MetricsReport) -> CliResult<()> {
    write_atomic(&out.join(format!("{stem}.csv")), report.to_csv().as_bytes())?;
    write_atomic(&out.join(format!("{stem}.json")), report.summary_json().as_bytes())
}

fn load_dataset(path: &Path) -> CliResult<SampleSet> {
    if !path.exists() {
        return Err(CliError::config(format!("dataset {} does not exist", path.display())));
    }
    read_sampleset(path).map_err(|e| CliError::at(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct GenReport {
    pub dataset: PathBuf,
    pub samples: usize,
    pub config_hash: String,
}

/// Generate the dataset described by `cfg` into `out/dataset.mnod` plus its
/// split manifest and a copy of the provenance block.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult<GenReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let set = build_sampleset(&cfg.data)?;
    let path = out.join(DATASET_FILE);
    write_sampleset(&set, &path)?;
    write_atomic(&out.join(PROVENANCE_FILE), canonical_json(&serde_json::to_value(&set.provenance)?).as_bytes())?;
    Ok(GenReport { dataset: path, samples: set.samples.len(), config_hash: config_hash(&cfg.data)? })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub final_step: u64,
    pub final_loss: Option<f64>,
    pub train: MetricsReport,
    pub test: MetricsReport,
}

fn parse_loss_curve(text: &str) -> CliResult<Vec<LossPoint>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (s, v) = l.split_once(',').ok_or_else(|| CliError::config(format!("bad loss curve row {l:?}")))?;
            let step = s.parse().map_err(|_| CliError::config(format!("bad step in loss curve row {l:?}")))?;
            let loss = v.parse().map_err(|_| CliError::config(format!("bad loss in loss curve row {l:?}")))?;
            Ok(LossPoint { step, loss })
        })
        .collect()
}

fn ids_of(set: &SampleSet, train: bool) -> Vec<u32> {
    if train {
        set.split.train.clone()
    } else {
        set.split.test.clone()
    }
}

fn check_shapes(model_in: usize, model_out: usize, pairs: &[(GridField, GridField)]) -> CliResult<()> {
    for (x, y) in pairs {
        if x.channels() != model_in || y.channels() != model_out {
            return Err(CliError::config(format!(
                "shape mismatch: model maps {model_in} -> {model_out} channels, data has {} -> {}",
                x.channels(),
                y.channels()
            )));
        }
    }
    Ok(())
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    out: &Path,
    set: &SampleSet,
    resume: Option<&Path>,
) -> CliResult<TrainReport> {
    let train = set.train_pairs();
    let test = set.test_pairs();
    let hash = config_hash(cfg)?;
    let task = cfg.task.name();
    let ckpt_path = out.join(CHECKPOINT);

    let (mut model, mut opt, mut curve) = match resume {
        Some(path) => {
            let (model, step, container) = OperatorModel::<f64>::load(path).map_err(|e| CliError::at(path, e))?;
            let model = model.cast::<T>();
            let opt = OptimizerState::import(&model.params, cfg.train.adam, step, &container)
                .map_err(|e| CliError::at(path, e))?;
            let curve_path = out.join(LOSS_CURVE);
            let mut curve = if curve_path.exists() { parse_loss_curve(&fs::read_to_string(&curve_path)?)? } else { Vec::new() };
            curve.retain(|p| p.step <= step);
            (model, opt, curve)
        }
        None => {
            let mut mc = cfg.resolved_model();
            let (x0, y0) = train.first().ok_or_else(|| CliError::config("training split is empty"))?;
            mc.in_channels = x0.channels();
            mc.out_channels = y0.channels();
            if cfg.normalize {
                let xs: Vec<&GridField> = train.iter().map(|p| &p.0).collect();
                let ys: Vec<&GridField> = train.iter().map(|p| &p.1).collect();
                mc.normalization = Some(Normalizer::fit(&xs, &ys)?);
            }
            let model = OperatorModel::<T>::new(mc, cfg.seed)?;
            model.save(&out.join(INIT_CHECKPOINT), 0, &[])?;
            let opt = fresh_optimizer(&model, &cfg.train);
            (model, opt, Vec::new())
        }
    };
    check_shapes(model.config.in_channels, model.config.out_channels, &train)?;

    let result = fit(&mut model, &mut opt, &train, &cfg.train, &mut curve, |step, m, o| {
        let tmp = ckpt_path.with_extension("mno1.tmp");
        m.save(&tmp, step, &o.export(&m.params))?;
        fs::rename(&tmp, &ckpt_path)?;
        Ok(())
    });
    write_atomic(&out.join(LOSS_CURVE), loss_curve_csv(&curve).as_bytes())?;
    result?;
    if !ckpt_path.exists() {
        // zero-step run: the checkpoint is the initial state
        model.save(&ckpt_path, opt.step, &opt.export(&model.params))?;
    }

    let train_report = MetricsReport::new(task, &hash, ids_of(set, true), evaluate(&model, &train)?)?;
    let test_report = MetricsReport::new(task, &hash, ids_of(set, false), evaluate(&model, &test)?)?;
    write_report(out, TRAIN_METRICS, &train_report)?;
    write_report(out, TEST_METRICS, &test_report)?;
    Ok(TrainReport { final_step: opt.step, final_loss: curve.last().map(|p| p.loss), train: train_report, test: test_report })
}

/// Train on `data` (default `out/dataset.mnod`), optionally resuming from a
/// checkpoint. Writes `init.mno1`, `checkpoint.mno1`, `loss_curve.csv` and
/// train/test metrics under `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, data: Option<&Path>, resume: Option<&Path>) -> CliResult<TrainReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let data_path = data.map(Path::to_path_buf).unwrap_or_else(|| out.join(DATASET_FILE));
    let set = load_dataset(&data_path)?;
    if set.provenance.config.task != cfg.task {
        return Err(CliError::config(format!(
            "task: config says {}, dataset holds {}",
            cfg.task.name(),
            set.provenance.config.task.name()
        )));
    }
    write_atomic(&out.join(RUN_CONFIG_FILE), cfg.to_json().as_bytes())?;
    match cfg.model.precision {
        Precision::F32 => train_typed::<f32>(cfg, out, &set, resume),
        Precision::F64 => train_typed::<f64>(cfg, out, &set, resume),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum SplitSel {
    Train,
    #[default]
    Test,
    All,
}

fn select(set: &SampleSet, split: SplitSel) -> (Vec<u32>, Vec<(GridField, GridField)>) {
    match split {
        SplitSel::Train => (set.split.train.clone(), set.train_pairs()),
        SplitSel::Test => (set.split.test.clone(), set.test_pairs()),
        SplitSel::All => {
            let ids = set.samples.iter().map(|s| s.id).collect();
            (ids, set.samples.iter().map(|s| (s.input.clone(), s.target.clone())).collect())
        }
    }
}

fn load_model(path: &Path) -> CliResult<OperatorModel<f64>> {
    if !path.exists() {
        return Err(CliError::config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(OperatorModel::<f64>::load(path).map_err(|e| CliError::at(path, e))?.0)
}

fn eval_typed<T: Real>(model: &OperatorModel<T>, pairs: &[(GridField, GridField)], ids: Vec<u32>, task: &str) -> CliResult<MetricsReport> {
    check_shapes(model.config.in_channels, model.config.out_channels, pairs)?;
    let hash = config_hash(&model.config)?;
    Ok(MetricsReport::new(task, &hash, ids, evaluate(model, pairs)?)?)
}

/// Metrics of a checkpoint on one split of a dataset, written to
/// `out/eval_metrics.{csv,json}`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, split: SplitSel, out: &Path) -> CliResult<MetricsReport> {
    let model = load_model(checkpoint)?;
    let set = load_dataset(data)?;
    let (ids, pairs) = select(&set, split);
    let task = set.provenance.config.task.name();
    let report = match model.config.precision {
        Precision::F32 => eval_typed(&model.cast::<f32>(), &pairs, ids, task)?,
        Precision::F64 => eval_typed(&model, &pairs, ids, task)?,
    };
    ensure_dir(out)?;
    write_report(out, EVAL_METRICS, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumReport {
    pub samples: Vec<u32>,
    pub input: SpectrumProfile,
    pub depth: Vec<DepthPoint>,
    pub profiles: Vec<SpectrumProfile>,
}

/// Depth profile of a checkpoint averaged over the first `n` test samples.
/// Writes `spectrum_input.csv`, one `spectrum_tapNN.csv` per tap,
/// `spectrum_depth.csv` and `spectrum.json`.
pub fn cmd_spectrum(checkpoint: &Path, data: &Path, n: usize, out: &Path) -> CliResult<SpectrumReport> {
    let model = load_model(checkpoint)?;
    let set = load_dataset(data)?;
    let pairs = set.test_pairs();
    if n == 0 || n > pairs.len() {
        return Err(CliError::config(format!("n: need 1 ≤ n ≤ {} test samples, got {n}", pairs.len())));
    }
    check_shapes(model.config.in_channels, model.config.out_channels, &pairs[..n])?;
    let inputs: Vec<GridField> = pairs[..n].iter().map(|p| p.0.clone()).collect();
    let report = spectrum_of(&model, &inputs)?;
    let report = SpectrumReport { samples: set.split.test[..n].to_vec(), ..report };
    ensure_dir(out)?;
    write_atomic(&out.join("spectrum_input.csv"), report.input.to_csv().as_bytes())?;
    for (k, p) in report.profiles.iter().enumerate() {
        write_atomic(&out.join(format!("spectrum_tap{k:02}.csv")), p.to_csv().as_bytes())?;
    }
    write_atomic(&out.join("spectrum_depth.csv"), depth_csv(&report.depth).as_bytes())?;
    write_atomic(&out.join("spectrum.json"), canonical_json(&serde_json::to_value(&report)?).as_bytes())?;
    Ok(report)
}

/// Input spectrum and per-tap profiles of `model` averaged over `inputs`.
pub fn spectrum_of(model: &OperatorModel<f64>, inputs: &[GridField]) -> CliResult<SpectrumReport> {
    let input = average_profiles(&inputs.iter().map(spectrum_profile).collect::<mno_core::Result<Vec<_>>>()?)?;
    let (depth, profiles) = depth_profile(model, inputs)?;
    Ok(SpectrumReport { samples: Vec::new(), input, depth, profiles })
}
