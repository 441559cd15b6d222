//! The GPTT raw tensor format.
//!
//! ```text
//! offset  size        field
//! 0       4           magic  "GPTT"
//! 4       1           version (1)
//! 5       1           rank r
//! 6       4*r         extents, u32 little-endian
//! 6+4r    4*prod      f32 little-endian payload, row-major
//! ```

use std::path::Path;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

pub const GPTT_MAGIC: &[u8; 4] = b"GPTT";
pub const GPTT_VERSION: u8 = 1;

/// A tensor of arbitrary rank as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::dims(
                "gptt",
                format!("{} values for extents {dims:?}", data.len()),
            ));
        }
        Ok(RawTensor { dims, data })
    }

    /// Full rank-4 `(N, H, W, C)` view.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        RawTensor {
            dims: t.shape().as_array().to_vec(),
            data: t.data().iter().map(|v| v.to_f32_lossy()).collect(),
        }
    }

    /// Rank-3 `(H, W, C)` view of a single-item tensor.
    pub fn from_item<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 {
            return Err(Error::dims("gptt", format!("rank-3 export of batch {s}")));
        }
        Ok(RawTensor {
            dims: vec![s.h, s.w, s.c],
            data: t.data().iter().map(|v| v.to_f32_lossy()).collect(),
        })
    }

    /// Converts to a rank-4 tensor. Lower ranks are left-padded:
    /// `(H, W, C)` loads as `(1, H, W, C)`, `(H, W)` as `(1, H, W, 1)` and
    /// `(L)` as `(1, 1, 1, L)`.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let shape = match self.dims.as_slice() {
            [n, h, w, c] => Shape::new(*n, *h, *w, *c),
            [h, w, c] => Shape::new(1, *h, *w, *c),
            [h, w] => Shape::new(1, *h, *w, 1),
            [l] => Shape::new(1, 1, 1, *l),
            d => {
                return Err(Error::dims(
                    "gptt",
                    format!("rank {} does not map to a rank-4 tensor", d.len()),
                ))
            }
        };
        Tensor::new(shape, self.data.iter().map(|&v| T::from_f32_exact(v)).collect())
    }
}

pub fn encode_gptt(t: &RawTensor) -> Result<Vec<u8>> {
    if t.dims.len() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("rank {} too large", t.dims.len())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(GPTT_MAGIC);
    out.push(GPTT_VERSION);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes one GPTT tensor from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_gptt(bytes: &[u8]) -> Result<(RawTensor, usize)> {
    let fail = |offset: usize, msg: String| Error::Format {
        what: "GPTT tensor",
        offset,
        msg,
    };
    if bytes.len() < 6 {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != GPTT_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != GPTT_VERSION {
        return Err(fail(4, format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let mut pos = 6;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| fail(pos, "truncated extents".into()))?;
        dims.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 4;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(6, "extent product overflows".into()))?;
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| fail(6, "payload size overflows".into()))?;
    let payload = bytes.get(pos..pos + payload_len).ok_or_else(|| {
        fail(
            bytes.len(),
            format!("truncated payload: need {payload_len} bytes from offset {pos}"),
        )
    })?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((RawTensor { dims, data }, pos + payload_len))
}

pub fn write_gptt(path: impl AsRef<Path>, t: &RawTensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_gptt(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_gptt(path: impl AsRef<Path>) -> Result<RawTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_gptt(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format {
            what: "GPTT tensor",
            offset: used,
            msg: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}
