//! Binary containers. `MLT1` is a named-tensor archive (magic, tensor count,
//! then per tensor: name, shape, row-major little-endian f64 payload). `MLTC`
//! wraps a JSON metadata blob plus an `MLT1` section and backs checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"MLT1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MLTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    entries: Vec<(String, ArrayD<f64>)>,
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format(format!("truncated {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

impl TensorArchive {
    pub fn new() -> Self {
        TensorArchive::default()
    }

    pub fn insert(&mut self, name: &str, tensor: ArrayD<f64>) -> Result<()> {
        if name.is_empty() {
            return Err(Error::contract("tensor name must be non-empty"));
        }
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::contract(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::missing(format!("tensor {name}")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            // standard layout guarantees row-major iteration order
            for &v in tensor.as_standard_layout().iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "archive magic")?;
        if magic != TENSOR_MAGIC {
            return Err(Error::format(format!(
                "bad archive magic {magic:?}, expected {TENSOR_MAGIC:?}"
            )));
        }
        let count = read_u32(r, "tensor count")? as usize;
        let mut archive = TensorArchive::new();
        for i in 0..count {
            let name_len = read_u32(r, "name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes, "tensor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format(format!("tensor {i} name is not utf-8")))?;
            let ndim = read_u32(r, "rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r, "shape")? as usize);
            }
            let total: usize = shape.iter().product();
            let mut data = Vec::with_capacity(total);
            let mut buf = [0u8; 8];
            for _ in 0..total {
                read_exact(r, &mut buf, "tensor payload")?;
                data.push(f64::from_le_bytes(buf));
            }
            let tensor = ArrayD::from_shape_vec(shape, data)
                .map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
            archive.insert(&name, tensor)?;
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let archive = Self::read_from(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after archive"));
        }
        Ok(archive)
    }
}

/// Checkpoint payload: opaque JSON metadata plus a tensor section. The
/// metadata string survives load/save untouched, so a round trip through
/// disk is byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub meta_json: String,
    pub tensors: TensorArchive,
}

impl CheckpointFile {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = self.meta_json.as_bytes();
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta)?;
        self.tensors.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(r, "checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = read_u64(r, "metadata length")? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        read_exact(r, &mut meta_bytes, "metadata")?;
        let meta_json = String::from_utf8(meta_bytes)
            .map_err(|_| Error::format("checkpoint metadata is not utf-8"))?;
        let tensors = TensorArchive::read_from(r)?;
        Ok(CheckpointFile { meta_json, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let file = Self::read_from(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(file)
    }
}
