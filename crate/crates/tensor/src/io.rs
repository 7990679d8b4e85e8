//! `PHR1` weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PHR1" | version: u32 | count: u32
//! count × { name_len: u32 | name: UTF-8 | dtype: u8 | rank: u32 | dims: rank × u64 | data }
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64; `data` is the raw little-endian
//! element buffer in row-major order.

use std::io::{Read, Write};

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PHR1";
pub const VERSION: u32 = 1;

/// One entry of a container, kept as raw bytes so that a read/write cycle
/// reproduces the input exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        StoredTensor {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decode, converting element width if the stored dtype differs.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(size)
                .map(|c| T::of(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(size)
                .map(|c| T::of(f64::read_le(c)))
                .collect(),
        };
        Tensor::new(self.dims.clone(), data)
    }
}

pub fn write_container<W: Write>(mut w: W, entries: &[StoredTensor]) -> Result<()> {
    let count = u32::try_from(entries.len())
        .map_err(|_| TensorError::Format("too many tensors".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.dtype as u8])?;
        w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
        for &d in &e.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&e.bytes)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<StoredTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Format("tensor name is not UTF-8".into()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = DType::from_tag(tag[0])
            .ok_or_else(|| TensorError::Format(format!("unknown dtype tag {}", tag[0])))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::Format(format!("`{name}` is too large")))?;
        let mut bytes = vec![0u8; numel * dtype.size()];
        r.read_exact(&mut bytes)?;
        out.push(StoredTensor {
            name,
            dtype,
            dims,
            bytes,
        });
    }
    Ok(out)
}

impl<T: Element> ParamStore<T> {
    pub fn to_container(&self) -> Vec<StoredTensor> {
        self.named_tensors()
            .into_iter()
            .map(|(n, t)| StoredTensor::from_tensor(n, t))
            .collect()
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        write_container(w, &self.to_container())
    }

    /// Load every stored tensor by name. All tensors of the store must be
    /// present with matching shapes.
    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let entries = read_container(r)?;
        let expected = self.named_tensors().len();
        if entries.len() != expected {
            return Err(TensorError::Format(format!(
                "container has {} tensors, model has {expected}",
                entries.len()
            )));
        }
        for e in &entries {
            self.set_tensor(&e.name, e.to_tensor()?)?;
        }
        Ok(())
    }
}
