//! `MCT1` tensor files.
//!
//! ```text
//! 0..4   b"MCT1"
//! 4      dtype (0 = f32, 1 = f64)
//! 5      rank r (≤ 8)
//! 6..    r × u32 LE extents
//! ...    row-major LE scalars
//! ```

use std::path::Path;

use super::{Dtype, Real, Tensor};
use crate::error::{Error, Result};
use crate::fsutil;

pub const MCT1_MAGIC: &[u8; 4] = b"MCT1";
pub const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mct1Header {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
}

impl Mct1Header {
    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn encoded_len(&self) -> usize {
        6 + 4 * self.dims.len()
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::Format("truncated header".into()));
        }
        if &bytes[..4] != MCT1_MAGIC {
            return Err(Error::Format("wrong magic".into()));
        }
        let dtype = Dtype::from_code(bytes[4])
            .ok_or_else(|| Error::Format(format!("unknown dtype {}", bytes[4])))?;
        let rank = bytes[5] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let end = 6 + 4 * rank;
        if bytes.len() < end {
            return Err(Error::Format("truncated extents".into()));
        }
        let dims = bytes[6..end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        Ok(Self { dtype, dims })
    }
}

/// A tensor of either precision, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to the requested precision.
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(Error::Format(format!("rank {} exceeds {MAX_RANK}", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MCT1_MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let header = Mct1Header::parse(bytes)?;
    let body = &bytes[header.encoded_len()..];
    let want = header
        .element_count()
        .checked_mul(header.dtype.size())
        .ok_or_else(|| Error::Format("size overflow".into()))?;
    if body.len() != want {
        return Err(Error::Format(format!(
            "size mismatch: header needs {want} data bytes, found {}",
            body.len()
        )));
    }
    fn read<T: Real>(dims: Vec<usize>, body: &[u8]) -> Result<Tensor<T>> {
        let data = body
            .chunks_exact(T::DTYPE.size())
            .map(T::read_le)
            .collect();
        Tensor::new(dims, data)
    }
    Ok(match header.dtype {
        Dtype::F32 => AnyTensor::F32(read(header.dims, body)?),
        Dtype::F64 => AnyTensor::F64(read(header.dims, body)?),
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads just the header, without loading the payload.
pub fn read_header(path: impl AsRef<Path>) -> Result<Mct1Header> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(6 + 4 * MAX_RANK);
    f.by_ref()
        .take((6 + 4 * MAX_RANK) as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Mct1Header::parse(&buf)
}

pub fn write_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), &encode(t)?)
}
