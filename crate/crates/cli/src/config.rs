//! Run configuration file.
//!
//! ```json
//! {
//!   "version": 1,
//!   "task": "darcy",
//!   "seed": 7,
//!   "output_dir": "runs/darcy",
//!   "data": { "n_train": 90, "n_test": 10, "darcy": { "grid": 32 } },
//!   "model": { "mixer_kind": "mamba_bidirectional", "d_v": 32, "depth": 3 },
//!   "train": { "steps": 500, "batch_size": 4, "lr": 0.001 },
//!   "normalize": true
//! }
//! ```
//!
//! Unknown keys are rejected at every level. `seed` is mandatory and drives
//! data generation, weight initialisation and batch order; `data.task`,
//! `data.seed` and `train.seed` may be omitted and must agree with the
//! top-level values when given.

use std::fs;
use std::path::{Path, PathBuf};

use mno_core::operator::ModelConfig;
use mno_core::pde_data::{DataConfig, Task};
use mno_core::train_eval::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub task: Task,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Fit per-channel input/output standardisation on the training split.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl RunConfig {
    /// Defaults for `task` with the given seed.
    pub fn new(task: Task, seed: u64) -> Self {
        let mut cfg = RunConfig {
            version: CONFIG_VERSION,
            task,
            seed,
            output_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            normalize: true,
        };
        cfg.set_seed(seed);
        cfg.data.task = task;
        cfg
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }

    /// Parse from JSON text, checking version, seed consistency and every
    /// sub-config.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid JSON: {e}")))?;
        let seed_given = |section: &str| raw.get(section).and_then(|s| s.get("seed")).and_then(Value::as_u64);
        let task_given = raw.get("data").and_then(|d| d.get("task")).cloned();
        let (data_seed, train_seed) = (seed_given("data"), seed_given("train"));
        let mut cfg: RunConfig = serde_json::from_value(raw).map_err(|e| CliError::config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::config(format!("version: {} is not supported (expected {CONFIG_VERSION})", cfg.version)));
        }
        for (name, given) in [("data.seed", data_seed), ("train.seed", train_seed)] {
            if given.is_some_and(|s| s != cfg.seed) {
                return Err(CliError::config(format!("{name}: conflicts with the top-level seed")));
            }
        }
        if task_given.is_some() && cfg.data.task != cfg.task {
            return Err(CliError::config("data.task: conflicts with the top-level task"));
        }
        cfg.data.task = cfg.task;
        let seed = cfg.seed;
        cfg.set_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::at(path, e))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.validate().map_err(|e| CliError::config(format!("data: {e}")))?;
        self.train.validate().map_err(|e| CliError::config(format!("train: {e}")))?;
        let model = self.resolved_model();
        model.validate().map_err(|e| CliError::config(format!("model: {e}")))?;
        Ok(())
    }

    /// Model config with channel counts taken from the task.
    pub fn resolved_model(&self) -> ModelConfig {
        let (cin, cout) = self.data.channels();
        let mut m = self.model.clone();
        m.in_channels = cin;
        m.out_channels = cout;
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_value(self).map(|v| v.to_string()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let cfg = RunConfig::from_json(r#"{"version":1,"task":"sw2d","seed":3}"#).unwrap();
        assert_eq!(cfg.data.task, Task::Sw2d);
        assert_eq!((cfg.data.seed, cfg.train.seed), (3, 3));
        assert_eq!(cfg.resolved_model().in_channels, 10);
        assert_eq!(cfg.resolved_model().out_channels, 91);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_json(r#"{"version":1,"task":"darcy"}"#).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"version":1,"task":"darcy","seed":1,"model":{"dv":4}}"#).unwrap_err();
        assert!(err.to_string().contains("dv"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cfl_is_named() {
        let err = RunConfig::from_json(r#"{"version":1,"task":"sw2d","seed":1,"data":{"sw2d":{"cfl":1.5}}}"#).unwrap_err();
        assert!(err.to_string().contains("cfl"), "{err}");
    }

    #[test]
    fn conflicting_seeds_are_rejected() {
        assert!(RunConfig::from_json(r#"{"version":1,"task":"darcy","seed":1,"train":{"seed":2}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"version":1,"task":"darcy","seed":1,"train":{"seed":1}}"#).is_ok());
        assert!(RunConfig::from_json(r#"{"version":2,"task":"darcy","seed":1}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::new(Task::Dr2d, 9);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
