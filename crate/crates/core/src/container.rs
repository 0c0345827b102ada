//! Named-tensor binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LREP"  u32 version  u64 tensor_count
//! per tensor:
//!   u32 name_len  name (UTF-8)  u8 dtype (0 = FP32, 1 = INT8)  u8 rank
//!   rank × u64 dims  raw element data
//! ```
//!
//! Model configuration travels in a JSON sidecar next to the container file
//! (see [`sidecar_path`]).

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::tensor::Matrix;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LREP";
pub const VERSION: u32 = 1;

/// Name of the single tensor in an exported embedding matrix.
pub const EMBEDDINGS: &str = "embeddings";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I8 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn i8(dims: Vec<usize>, data: Vec<i8>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: TensorData::I8(data),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// An ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Fetches an FP32 tensor and checks its shape.
    pub fn f32_tensor(&self, name: &str, dims: &[usize]) -> Result<&[f32]> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
        if t.dims != dims {
            return Err(Error::Contract(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                t.dims, dims
            )));
        }
        match &t.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I8(_) => Err(Error::Format(format!("tensor {name:?} is not FP32"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype() as u8);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => {
                    out.reserve(v.len() * 4);
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::I8(v) => out.extend(v.iter().map(|x| *x as u8)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an LREP container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u64()?;
        let mut c = Container::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} size overflows")))?;
            let data = match dtype {
                0 => {
                    let nbytes = numel
                        .checked_mul(4)
                        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
                    let raw = r.take(nbytes)?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                1 => TensorData::I8(r.take(numel)?.iter().map(|b| *b as i8).collect()),
                other => return Err(Error::Format(format!("unknown dtype {other} for {name:?}"))),
            };
            if c.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate tensor name {name:?}")));
            }
            c.tensors.push((name, Tensor { dims, data }));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

/// JSON sidecar path for a container: `model.lrep` -> `model.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes an `n × d` embedding matrix as a single-tensor container.
pub fn save_embeddings(path: impl AsRef<Path>, embeddings: &[Vec<f32>]) -> Result<()> {
    let dim = embeddings.first().map_or(0, Vec::len);
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Contract("embeddings have inconsistent dimensions".into()));
    }
    let mut c = Container::new();
    c.insert(
        EMBEDDINGS,
        Tensor::f32(vec![embeddings.len(), dim], embeddings.concat()),
    );
    c.save(path)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>> {
    let c = Container::load(path)?;
    let t = c
        .get(EMBEDDINGS)
        .ok_or_else(|| Error::Format("container has no \"embeddings\" tensor".into()))?;
    let (TensorData::F32(data), [rows, cols]) = (&t.data, t.dims.as_slice()) else {
        return Err(Error::Format("\"embeddings\" must be a rank-2 FP32 tensor".into()));
    };
    if *cols == 0 {
        return Ok(vec![Vec::new(); *rows]);
    }
    Ok(data.chunks_exact(*cols).map(<[f32]>::to_vec).collect())
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor::f32(vec![m.rows, m.cols], m.data.clone())
    }
}
