//! Checkpoint archive.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "SPHRCKPT"
//! version      u32       currently 1
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 TOML: step, seed, [model] config
//! n_arrays     u32
//! per array:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8        0 = f32, 1 = f64
//!   ndim       u8
//!   dims       ndim × u64
//!   data       product(dims) × 4 or 8 bytes, little-endian IEEE-754
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Model parameters are stored as `param/<name>`; optimizer state, when
//! present, as `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::SphereModel;
use crate::error::{Result, SphereError};

pub const MAGIC: &[u8; 8] = b"SPHRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => ArrayData::F64(flat.to_vec1::<f64>()?),
            _ => ArrayData::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
        };
        Ok(Self {
            name: name.into(),
            shape: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let dev = candle_core::Device::Cpu;
        let t = match &self.data {
            ArrayData::F32(v) => Tensor::from_slice(v, self.shape.as_slice(), &dev)?,
            ArrayData::F64(v) => Tensor::from_slice(v, self.shape.as_slice(), &dev)?,
        };
        Ok(t.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: u64,
    seed: u64,
    model: ModelConfig,
}

/// Parameters plus the state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &SphereModel, step: u64, seed: u64) -> Result<Self> {
        let arrays = model
            .params()
            .iter()
            .map(|(name, var)| NamedArray::from_tensor(format!("param/{name}"), var.as_tensor()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: model.config().clone(),
            step,
            seed,
            arrays,
        })
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model(&self, dtype: DType) -> Result<SphereModel> {
        let model = SphereModel::new(self.config.clone(), dtype, 0)?;
        self.load_into(&model)?;
        Ok(model)
    }

    /// Copies the stored parameters into an existing model of the same config.
    pub fn load_into(&self, model: &SphereModel) -> Result<()> {
        if model.config() != &self.config {
            return Err(SphereError::ConfigMismatch(format!(
                "checkpoint was written for {:?}, model is {:?}",
                self.config,
                model.config()
            )));
        }
        for (name, _) in model.params().iter() {
            let arr = self.array(&format!("param/{name}")).ok_or_else(|| {
                SphereError::CorruptCheckpoint(format!("missing parameter {name}"))
            })?;
            model.params().set(name, &arr.to_tensor(model.dtype())?)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&Meta {
            step: self.step,
            seed: self.seed,
            model: self.config.clone(),
        })
        .map_err(|e| SphereError::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(match a.data {
                ArrayData::F32(_) => 0,
                ArrayData::F64(_) => 1,
            });
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| SphereError::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic or file too short"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(SphereError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch (truncated or modified file)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| corrupt("meta is not UTF-8"))?;
        let meta: Meta = toml::from_str(meta).map_err(|e| SphereError::CorruptCheckpoint(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("array name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = match dtype {
                0 => ArrayData::F32(
                    r.take(count * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => ArrayData::F64(
                    r.take(count * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(SphereError::CorruptCheckpoint(format!("unknown dtype tag {other}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after last array"));
        }
        Ok(Self {
            config: meta.model,
            step: meta.step,
            seed: meta.seed,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| SphereError::io(format!("writing {}", path.display()), e))
    }

    /// Loads a checkpoint; with `expected` set, a differing config is an error.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SphereError::io(format!("reading {}", path.display()), e))?;
        let ckpt = Self::from_bytes(&bytes)?;
        if let Some(cfg) = expected {
            if cfg != &ckpt.config {
                return Err(SphereError::ConfigMismatch(format!(
                    "checkpoint config {:?} differs from requested {:?}",
                    ckpt.config, cfg
                )));
            }
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SphereError::CorruptCheckpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
