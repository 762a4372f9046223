//! Sample sets and the `MNOD` dataset file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MNOD", u16 version = 1
//! u32 provenance length, provenance bytes (canonical JSON)
//! per sample: u32 id, input tensor, target tensor
//! tensor: u32 rank, u32 dims[rank], f32 payload
//! ```
//!
//! The train/test split lives next to the data file in `<path>.split.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use super::darcy::{gen_darcy_coefficient, solve_darcy, DarcyConfig};
use super::diffusion_reaction::{simulate_diffusion_reaction, DRConfig};
use super::shallow_water::{simulate_shallow_water, SWEConfig};
use crate::error::{MnoError, Result};
use crate::exec;
use crate::field::{Extent, GridField};
use crate::operator::checkpoint::{canonical_json, Reader};
use crate::operator::stack_frames;

const MAGIC: &[u8; 4] = b"MNOD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Darcy,
    Sw2d,
    Dr2d,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Darcy => "darcy",
            Task::Sw2d => "sw2d",
            Task::Dr2d => "dr2d",
        }
    }

    /// Field components per time frame (0 for the steady Darcy problem).
    pub fn frame_components(self) -> usize {
        match self {
            Task::Darcy => 0,
            Task::Sw2d => 1,
            Task::Dr2d => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: Task,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Frames given as input for time-dependent tasks; the rest are targets.
    pub input_frames: usize,
    pub darcy: DarcyConfig,
    pub sw2d: SWEConfig,
    pub dr2d: DRConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: Task::Darcy,
            n_train: 900,
            n_test: 100,
            seed: 0,
            input_frames: 10,
            darcy: DarcyConfig::default(),
            sw2d: SWEConfig::default(),
            dr2d: DRConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(MnoError::invalid("n_train, n_test: at least one sample each"));
        }
        if u32::try_from(self.n_train + self.n_test).is_err() {
            return Err(MnoError::invalid("n_train + n_test exceeds the u32 id range"));
        }
        match self.task {
            Task::Darcy => self.darcy.validate(),
            Task::Sw2d => {
                self.sw2d.validate()?;
                self.check_frames(self.sw2d.n_frames)
            }
            Task::Dr2d => {
                self.dr2d.validate()?;
                self.check_frames(self.dr2d.n_frames)
            }
        }
    }

    fn check_frames(&self, n_frames: usize) -> Result<()> {
        if self.input_frames == 0 || self.input_frames >= n_frames {
            return Err(MnoError::invalid(format!("input_frames: need 1 ≤ input_frames < n_frames = {n_frames}")));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_train + self.n_test
    }

    pub fn grid(&self) -> usize {
        match self.task {
            Task::Darcy => self.darcy.grid,
            Task::Sw2d => self.sw2d.grid,
            Task::Dr2d => self.dr2d.grid,
        }
    }

    /// `(input channels, target channels)` of every sample.
    pub fn channels(&self) -> (usize, usize) {
        let c = self.task.frame_components();
        match self.task {
            Task::Darcy => (2, 1),
            Task::Sw2d => (c * self.input_frames, c * (self.sw2d.n_frames - self.input_frames)),
            Task::Dr2d => (c * self.input_frames, c * (self.dr2d.n_frames - self.input_frames)),
        }
    }

    pub fn extent(&self) -> Extent {
        match self.task {
            Task::Darcy => Extent::UNIT,
            Task::Sw2d => Extent::square(-super::SWE_HALF_WIDTH, super::SWE_HALF_WIDTH),
            Task::Dr2d => Extent::square(-1.0, 1.0),
        }
    }

    pub fn dt(&self) -> Option<f64> {
        match self.task {
            Task::Darcy => None,
            Task::Sw2d => Some(self.sw2d.frame_dt()),
            Task::Dr2d => Some(self.dr2d.frame_dt()),
        }
    }
}

/// SplitMix64 finaliser.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator seed of sample `index` in a set built from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub input: GridField,
    pub target: GridField,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub generator: String,
    pub config: DataConfig,
    pub sample_seeds: Vec<u64>,
    pub extent: Extent,
    pub dt: Option<f64>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub provenance: Provenance,
}

fn round_to_f32(mut f: GridField) -> GridField {
    f.data.mapv_inplace(|v| v as f32 as f64);
    f
}

fn time_pair(frames: &[GridField], components: usize, input_frames: usize) -> Result<(GridField, GridField)> {
    let pick = |f: &GridField| GridField::new(f.data.slice(s![.., .., ..components]).to_owned(), f.extent, f.dt);
    let frames: Vec<GridField> = frames.iter().map(pick).collect::<Result<_>>()?;
    Ok((stack_frames(&frames[..input_frames])?, stack_frames(&frames[input_frames..])?))
}

/// Generate sample `index` of the set described by `cfg` on its own. Values
/// are rounded to `f32` so they match what the file stores.
pub fn regenerate_sample(cfg: &DataConfig, index: usize) -> Result<Sample> {
    let seed = sample_seed(cfg.seed, index);
    let (input, target) = match cfg.task {
        Task::Darcy => {
            let a = gen_darcy_coefficient(&cfg.darcy, seed)?;
            let u = solve_darcy(&a, cfg.darcy.beta)?;
            let (h, w, _) = a.data.dim();
            let mut data = Array3::from_elem((h, w, 2), cfg.darcy.beta);
            data.slice_mut(s![.., .., 0..1]).assign(&a.data);
            (GridField::new(data, a.extent, None)?, u)
        }
        Task::Sw2d => time_pair(&simulate_shallow_water(&cfg.sw2d, seed)?, 1, cfg.input_frames)?,
        Task::Dr2d => time_pair(&simulate_diffusion_reaction(&cfg.dr2d, seed)?, 2, cfg.input_frames)?,
    };
    Ok(Sample { id: index as u32, input: round_to_f32(input), target: round_to_f32(target) })
}

/// Generate every sample of `cfg` in parallel. Ids `0..n_train` form the
/// training split and the rest the test split.
pub fn build_sampleset(cfg: &DataConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let n = cfg.n_samples();
    let samples = exec::map_range(n, |i| regenerate_sample(cfg, i)).into_iter().collect::<Result<Vec<_>>>()?;
    let split = Split { train: (0..cfg.n_train as u32).collect(), test: (cfg.n_train as u32..n as u32).collect() };
    let provenance = Provenance {
        generator: format!("mno-core {}", env!("CARGO_PKG_VERSION")),
        config: cfg.clone(),
        sample_seeds: (0..n).map(|i| sample_seed(cfg.seed, i)).collect(),
        extent: cfg.extent(),
        dt: cfg.dt(),
        n_samples: n,
    };
    Ok(SampleSet { samples, split, provenance })
}

impl SampleSet {
    fn pairs(&self, ids: &[u32]) -> Vec<(GridField, GridField)> {
        ids.iter()
            .filter_map(|id| self.samples.iter().find(|s| s.id == *id))
            .map(|s| (s.input.clone(), s.target.clone()))
            .collect()
    }

    pub fn train_pairs(&self) -> Vec<(GridField, GridField)> {
        self.pairs(&self.split.train)
    }

    pub fn test_pairs(&self) -> Vec<(GridField, GridField)> {
        self.pairs(&self.split.test)
    }

    /// Split lists are disjoint and together cover every sample id once.
    pub fn check_split(&self) -> Result<()> {
        let mut all: Vec<u32> = self.split.train.iter().chain(&self.split.test).copied().collect();
        all.sort_unstable();
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if all != ids || all.windows(2).any(|w| w[0] == w[1]) {
            return Err(MnoError::invalid("split lists are not a disjoint cover of the sample ids"));
        }
        Ok(())
    }
}

/// Path of the split manifest belonging to a dataset file.
pub fn split_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".split.json");
    PathBuf::from(s)
}

fn push_tensor(buf: &mut Vec<u8>, f: &GridField) {
    let (h, w, c) = f.data.dim();
    buf.extend_from_slice(&3u32.to_le_bytes());
    for d in [h, w, c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in f.data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Serialise the data file to bytes.
pub fn encode_sampleset(set: &SampleSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let prov = canonical_json(&serde_json::to_value(&set.provenance)?);
    buf.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    buf.extend_from_slice(prov.as_bytes());
    for s in &set.samples {
        buf.extend_from_slice(&s.id.to_le_bytes());
        push_tensor(&mut buf, &s.input);
        push_tensor(&mut buf, &s.target);
    }
    Ok(buf)
}

pub fn write_sampleset(set: &SampleSet, path: &Path) -> Result<()> {
    set.check_split()?;
    fs::write(path, encode_sampleset(set)?)?;
    fs::write(split_path(path), canonical_json(&serde_json::to_value(&set.split)?))?;
    Ok(())
}

fn read_tensor(r: &mut Reader, extent: Extent, dt: Option<f64>, what: &str) -> Result<GridField> {
    let rank_at = r.pos;
    let rank = r.u32(what)?;
    if rank != 3 {
        return Err(MnoError::Format { offset: rank_at as u64, message: format!("{what}: rank {rank}, expected 3") });
    }
    let dims = [r.u32(what)? as usize, r.u32(what)? as usize, r.u32(what)? as usize];
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.err("tensor size overflow"))?;
    let at = r.pos;
    let values = r.f32s(n, what)?;
    let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), values.into_iter().map(f64::from).collect())
        .map_err(|e| MnoError::Format { offset: at as u64, message: e.to_string() })?;
    GridField::new(data, extent, dt).map_err(|e| MnoError::Format { offset: at as u64, message: format!("{what}: {e}") })
}

/// Parse a data file from bytes (without the split manifest).
pub fn decode_sampleset(bytes: &[u8]) -> Result<(Provenance, Vec<Sample>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.expect_magic(MAGIC)?;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(MnoError::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let prov_at = r.pos;
    let prov: Provenance = serde_json::from_value(r.json("provenance")?)
        .map_err(|e| MnoError::Format { offset: prov_at as u64, message: format!("provenance: {e}") })?;
    let mut samples = Vec::with_capacity(prov.n_samples.min(1 << 16));
    while r.pos < bytes.len() {
        let id = r.u32("sample id")?;
        let input = read_tensor(&mut r, prov.extent, prov.dt, "input tensor")?;
        let target = read_tensor(&mut r, prov.extent, prov.dt, "target tensor")?;
        samples.push(Sample { id, input, target });
    }
    if samples.len() != prov.n_samples {
        return Err(r.err(format!("{} samples present, provenance declares {}", samples.len(), prov.n_samples)));
    }
    Ok((prov, samples))
}

pub fn read_sampleset(path: &Path) -> Result<SampleSet> {
    let (provenance, samples) = decode_sampleset(&fs::read(path)?)?;
    let split_file = split_path(path);
    let split: Split = serde_json::from_slice(&fs::read(&split_file)?)?;
    let set = SampleSet { samples, split, provenance };
    set.check_split()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> DataConfig {
        DataConfig {
            task,
            n_train: 2,
            n_test: 1,
            seed: 5,
            input_frames: 3,
            darcy: DarcyConfig { grid: 8, ..Default::default() },
            sw2d: SWEConfig { grid: 8, n_frames: 6, t_end: 0.1, ..Default::default() },
            dr2d: DRConfig { grid: 8, n_frames: 6, t_end: 0.25, ..Default::default() },
        }
    }

    #[test]
    fn shapes_follow_the_task() {
        for task in [Task::Darcy, Task::Sw2d, Task::Dr2d] {
            let cfg = small(task);
            let set = build_sampleset(&cfg).unwrap();
            let (ci, ct) = cfg.channels();
            assert_eq!(set.samples.len(), 3);
            for s in &set.samples {
                assert_eq!(s.input.data.dim(), (8, 8, ci), "{task:?}");
                assert_eq!(s.target.data.dim(), (8, 8, ct), "{task:?}");
                assert_eq!(s.input.extent, cfg.extent());
                assert_eq!(s.input.dt, cfg.dt());
            }
        }
    }

    #[test]
    fn darcy_input_carries_beta() {
        let mut cfg = small(Task::Darcy);
        cfg.darcy.beta = 2.5;
        let s = regenerate_sample(&cfg, 0).unwrap();
        assert!(s.input.channel(1).iter().all(|&v| v == 2.5));
        assert!(s.target.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ten_sample_split_is_disjoint() {
        let cfg = DataConfig { n_train: 9, n_test: 1, ..small(Task::Darcy) };
        let set = build_sampleset(&cfg).unwrap();
        assert_eq!(set.samples.len(), 10);
        assert!(set.split.test.iter().all(|id| !set.split.train.contains(id)));
        set.check_split().unwrap();
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(build_sampleset(&DataConfig { n_test: 0, ..small(Task::Darcy) }).is_err());
    }

    #[test]
    fn bad_version_is_reported() {
        let set = build_sampleset(&small(Task::Darcy)).unwrap();
        let mut bytes = encode_sampleset(&set).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_sampleset(&bytes), Err(MnoError::Format { offset: 4, .. })));
    }
}
