//! `MNO1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MNO1"
//! u32 header length, header bytes (canonical JSON)
//! u32 tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rank, u32 dims[rank], f32 payload
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde_json::Value;

use super::{ModelConfig, OperatorModel};
use crate::autodiff::Real;
use crate::error::{MnoError, Result};

const MAGIC: &[u8; 4] = b"MNO1";

/// Header plus named 2-D tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Value,
    pub tensors: Vec<(String, Array2<f32>)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&Array2<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Serialise with keys sorted and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    // serde_json's default map is ordered by key, so re-serialising a Value
    // yields sorted keys.
    v.to_string()
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let header = canonical_json(&c.header);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, t) in &c.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MnoError::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("tensor size overflow"))?, what)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }

    pub fn json(&mut self, what: &str) -> Result<Value> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        serde_json::from_slice(bytes)
            .map_err(|e| MnoError::Format { offset: start as u64, message: format!("bad {what} JSON: {e}") })
    }

    pub fn err(&self, message: impl Into<String>) -> MnoError {
        MnoError::Format { offset: self.pos as u64, message: message.into() }
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len(), "magic")?;
        if got != magic {
            return Err(MnoError::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    r.expect_magic(MAGIC)?;
    let header = r.json("header")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| MnoError::Format { offset: at as u64, message: "tensor name is not UTF-8".into() })?
            .to_string();
        let rank_at = r.pos;
        let rank = r.u32("rank")?;
        if rank != 2 {
            return Err(MnoError::Format { offset: rank_at as u64, message: format!("tensor {name} has rank {rank}, expected 2") });
        }
        let rows = r.u32("dims")? as usize;
        let cols = r.u32("dims")? as usize;
        let data = r.f32s(rows * cols, "tensor payload")?;
        tensors.push((name, Array2::from_shape_vec((rows, cols), data).expect("payload length")));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Container { header, tensors })
}

impl<T: Real> OperatorModel<T> {
    /// Parameters as `f32` tensors in store order.
    pub fn tensors(&self) -> Vec<(String, Array2<f32>)> {
        self.params.iter().map(|(_, p)| (p.name.clone(), p.value.mapv(|v| v.f64() as f32))).collect()
    }

    /// Write an `MNO1` checkpoint with the model config, `step`, and any
    /// extra tensors (e.g. optimiser moments).
    pub fn save(&self, path: &Path, step: u64, extra: &[(String, Array2<f32>)]) -> Result<()> {
        let header = serde_json::json!({
            "format_version": 1,
            "config": serde_json::to_value(&self.config)?,
            "step": step,
        });
        let mut tensors = self.tensors();
        tensors.extend(extra.iter().cloned());
        write_container(path, &Container { header, tensors })
    }

    /// Rebuild a model from a checkpoint. Returns the model, its step and
    /// the container (for extra tensors).
    pub fn load(path: &Path) -> Result<(Self, u64, Container)> {
        let c = read_container(path)?;
        let config: ModelConfig = serde_json::from_value(
            c.header.get("config").cloned().ok_or_else(|| MnoError::Format { offset: 8, message: "header lacks config".into() })?,
        )?;
        let step = c.header.get("step").and_then(Value::as_u64).unwrap_or(0);
        let mut model = OperatorModel::<T>::new(config, 0)?;
        for (_, p) in model.params.iter_mut() {
            let t = c
                .tensor(&p.name)
                .ok_or_else(|| MnoError::Format { offset: 0, message: format!("checkpoint lacks tensor {}", p.name) })?;
            if t.dim() != p.value.dim() {
                return Err(MnoError::Format {
                    offset: 0,
                    message: format!("tensor {} has shape {:?}, expected {:?}", p.name, t.dim(), p.value.dim()),
                });
            }
            p.value = t.mapv(|v| T::of(v as f64));
        }
        Ok((model, step, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::MixerKind;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mno1");
        let cfg = ModelConfig { d_v: 4, depth: 1, d_state: 2, mixer_kind: MixerKind::CrossMambaBidirectional, ..Default::default() };
        let m = OperatorModel::<f32>::new(cfg, 3).unwrap();
        let extra = vec![("adam.m.x".to_string(), Array2::from_elem((1, 2), 0.5f32))];
        m.save(&path, 17, &extra).unwrap();
        let (back, step, c) = OperatorModel::<f32>::load(&path).unwrap();
        assert_eq!(step, 17);
        assert_eq!(back.config, m.config);
        assert_eq!(back.tensors(), m.tensors());
        assert_eq!(c.tensor("adam.m.x"), Some(&extra[0].1));
        let path2 = dir.path().join("m2.mno1");
        back.save(&path2, 17, &extra).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mno1");
        let m = OperatorModel::<f32>::new(ModelConfig { d_v: 4, depth: 1, ..Default::default() }, 3).unwrap();
        m.save(&path, 0, &[]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        match read_container(&path) {
            Err(MnoError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        bytes[0] = b'M';
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        match read_container(&path) {
            Err(MnoError::Format { offset, .. }) => assert!(offset > 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
