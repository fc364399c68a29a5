//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "AHNCKPT\0"
//! version    u32      = 1
//! cfg_hash   32 bytes SHA-256 of the config text
//! cfg_len    u32, then cfg_len bytes of key=value text
//! n_arrays   u32
//! index      per array: name_len u16, name, dtype u8, flags u8, rank u8,
//!            dims u64 × rank, offset u64 (from file start), byte_len u64
//! payload    raw little-endian element data
//! ```
//!
//! Flag bit 0 marks arrays owned by a memory module.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::Model;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::numerics::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"AHNCKPT\0";
pub const VERSION: u32 = 1;
pub const FLAG_AHN: u8 = 1;

/// One array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredArray {
    pub name: String,
    pub dtype: DType,
    pub flags: u8,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredArray {
    pub fn from_tensor<T: Real>(name: &str, flags: u8, t: &Tensor<T>) -> Self {
        StoredArray {
            name: name.to_string(),
            dtype: T::DTYPE,
            flags,
            shape: t.shape().to_vec(),
            bytes: T::to_le_bytes_vec(t.data()),
        }
    }

    pub fn is_ahn(&self) -> bool {
        self.flags & FLAG_AHN != 0
    }

    /// Decodes into `T`, converting precision if the stored dtype differs.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            d if d == T::DTYPE => T::from_le_bytes_slice(&self.bytes),
            DType::F32 => f32::from_le_bytes_slice(&self.bytes)
                .into_iter()
                .map(|v| T::from_f64_lossy(f64::from(v)))
                .collect(),
            DType::F64 => f64::from_le_bytes_slice(&self.bytes)
                .into_iter()
                .map(T::from_f64_lossy)
                .collect(),
        };
        Tensor::new(&self.shape, data)
    }
}

/// Config text plus named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: String,
    pub arrays: Vec<StoredArray>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&Sha256::digest(self.config.as_bytes()));
        header.extend_from_slice(&u32_len(self.config.len())?.to_le_bytes());
        header.extend_from_slice(self.config.as_bytes());
        header.extend_from_slice(&u32_len(self.arrays.len())?.to_le_bytes());
        let index_len: usize = self
            .arrays
            .iter()
            .map(|a| 2 + a.name.len() + 3 + 8 * a.shape.len() + 16)
            .sum();
        let mut offset = (header.len() + index_len) as u64;
        for a in &self.arrays {
            let name_len =
                u16::try_from(a.name.len()).map_err(|_| Error::Format(format!("array name too long: {}", a.name)))?;
            let rank = u8::try_from(a.shape.len()).map_err(|_| Error::Format("rank above 255".into()))?;
            if a.bytes.len() != a.shape.iter().product::<usize>() * a.dtype.size() {
                return Err(Error::Format(format!(
                    "array {} payload does not match its shape",
                    a.name
                )));
            }
            header.extend_from_slice(&name_len.to_le_bytes());
            header.extend_from_slice(a.name.as_bytes());
            header.extend_from_slice(&[a.dtype.code(), a.flags, rank]);
            for &d in &a.shape {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
            header.extend_from_slice(&offset.to_le_bytes());
            header.extend_from_slice(&(a.bytes.len() as u64).to_le_bytes());
            offset += a.bytes.len() as u64;
        }
        for a in &self.arrays {
            header.extend_from_slice(&a.bytes);
        }
        Ok(header)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hash = r.take(32)?.to_vec();
        let cfg_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Format("config text is not UTF-8".into()))?
            .to_string();
        if Sha256::digest(config.as_bytes()).as_slice() != hash.as_slice() {
            return Err(Error::ConfigHash);
        }
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let head = r.take(3)?;
            let dtype = DType::from_code(head[0]).ok_or_else(|| Error::Format(format!("unknown dtype {}", head[0])))?;
            let (flags, rank) = (head[1], usize::from(head[2]));
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Format("truncated file".into()))?;
            if shape.iter().try_fold(dtype.size(), |acc, &d| acc.checked_mul(d)) != Some(len) {
                return Err(Error::Format(format!("array {name} length does not match its shape")));
            }
            arrays.push(StoredArray {
                name,
                dtype,
                flags,
                shape,
                bytes: bytes[offset..end].to_vec(),
            });
        }
        Ok(Container { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format("section too large".into()))
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
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Which arrays a partial load replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArraySelect {
    All,
    AhnOnly,
    BaseOnly,
}

impl ArraySelect {
    fn takes(self, ahn: bool) -> bool {
        match self {
            ArraySelect::All => true,
            ArraySelect::AhnOnly => ahn,
            ArraySelect::BaseOnly => !ahn,
        }
    }
}

impl<T: Real> Model<T> {
    pub fn to_container(&self, select: ArraySelect) -> Container {
        Container {
            config: self.cfg.to_text(),
            arrays: self
                .arrays()
                .into_iter()
                .filter(|a| select.takes(a.ahn))
                .map(|a| StoredArray::from_tensor(&a.name, if a.ahn { FLAG_AHN } else { 0 }, a.tensor))
                .collect(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container(ArraySelect::All).save(path)
    }

    /// Loads a complete model; every array of the configured layout must be present.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg = ModelConfig::from_text(&c.config)?;
        let mut model = Model::init(&cfg, 0)?;
        let loaded = model.load_arrays(c, ArraySelect::All)?;
        let expected = model.arrays().len();
        if loaded != expected {
            return Err(Error::Format(format!("checkpoint holds {loaded} of {expected} arrays")));
        }
        Ok(model)
    }

    /// Overwrites the selected arrays from `c`, returning how many were replaced.
    /// The stored architecture must match this model's.
    pub fn load_arrays(&mut self, c: &Container, select: ArraySelect) -> Result<usize> {
        let stored = ModelConfig::from_text(&c.config)?;
        if !stored.same_arch(&self.cfg) {
            return Err(Error::ConfigHash);
        }
        let mut slots = self.arrays_mut();
        let mut count = 0;
        for a in &c.arrays {
            let slot = slots
                .iter_mut()
                .find(|s| s.name == a.name)
                .ok_or_else(|| Error::UnknownArray(a.name.clone()))?;
            if slot.ahn != a.is_ahn() {
                return Err(Error::Format(format!("array {} has the wrong ownership flag", a.name)));
            }
            if !select.takes(slot.ahn) {
                continue;
            }
            let t = a.to_tensor::<T>()?;
            if t.shape() != slot.tensor.shape() {
                return Err(Error::dim("load_arrays", t.shape(), slot.tensor.shape()));
            }
            *slot.tensor = t;
            count += 1;
        }
        Ok(count)
    }

    pub fn load_arrays_from(&mut self, path: &Path, select: ArraySelect) -> Result<usize> {
        self.load_arrays(&Container::load(path)?, select)
    }
}
