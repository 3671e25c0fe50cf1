//! `FCT1` binary tensors.
//!
//! Layout: magic `FCT1`, a `u8` dtype code, a `u8` rank, `rank`
//! little-endian `u32` dims, then the row-major little-endian payload.
//! Complex tensors (`c128`) store interleaved `(re, im)` pairs and carry
//! their complex dims in the header; in memory they gain a trailing axis
//! of 2.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FCT1";
const DTYPE_OFFSET: u64 = 4;
const HEADER_FIXED: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
    C128,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::C128 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::C128),
            _ => None,
        }
    }

    /// Bytes per header element.
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::C128 => 16,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::C128 => "c128",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
}

impl Header {
    pub fn byte_len(&self) -> usize {
        HEADER_FIXED + 4 * self.dims.len()
    }

    pub fn payload_len(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product::<u64>() * self.dtype.size() as u64
    }

    /// Shape of the decoded [`Tensor`].
    pub fn tensor_shape(&self) -> Vec<usize> {
        let mut s = self.dims.clone();
        if self.dtype == Dtype::C128 {
            s.push(2);
        }
        s
    }
}

fn need(bytes: &[u8], offset: usize, n: usize) -> Result<()> {
    if bytes.len() < offset + n {
        return Err(Error::Truncated {
            offset: offset as u64,
            expected: (offset + n) as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    need(bytes, 0, 4)?;
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    need(bytes, 4, 2)?;
    let dtype = Dtype::from_code(bytes[4]).ok_or(Error::UnknownDtype {
        offset: DTYPE_OFFSET,
        code: bytes[4],
    })?;
    let rank = bytes[5] as usize;
    need(bytes, HEADER_FIXED, 4 * rank)?;
    let dims = (0..rank)
        .map(|i| {
            let o = HEADER_FIXED + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    Ok(Header { dtype, dims })
}

/// Serialize `t` with the given dtype. `c128` needs a trailing axis of 2;
/// `f32` rounds each value.
pub fn encode(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let mut dims = t.shape().to_vec();
    if dtype == Dtype::C128 {
        if dims.last() != Some(&2) {
            return Err(Error::InvalidArgument(format!("c128 tensors need a trailing axis of 2, got shape {dims:?}")));
        }
        dims.pop();
    }
    if dims.len() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("rank {} exceeds 255", dims.len())));
    }
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * dims.len() + t.len() * 8);
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(dims.len() as u8);
    for &d in &dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 | Dtype::C128 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parse a complete file image; trailing bytes are rejected.
pub fn decode(bytes: &[u8]) -> Result<(Dtype, Tensor)> {
    let header = decode_header(bytes)?;
    let start = header.byte_len();
    let end = start as u64 + header.payload_len();
    if (bytes.len() as u64) < end {
        return Err(Error::Truncated {
            offset: start as u64,
            expected: end,
            actual: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > end {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after the payload at byte offset {end}",
            bytes.len() as u64 - end
        )));
    }
    let payload = &bytes[start..];
    let data: Vec<f64> = match header.dtype {
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F64 | Dtype::C128 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok((header.dtype, Tensor::new(header.tensor_shape(), data)?))
}

/// Like [`decode`], but the stored dtype must equal `expected`.
pub fn decode_as(bytes: &[u8], expected: Dtype) -> Result<Tensor> {
    let header = decode_header(bytes)?;
    if header.dtype != expected {
        return Err(Error::DtypeMismatch {
            offset: DTYPE_OFFSET,
            expected: expected.name().into(),
            found: header.dtype.name().into(),
        });
    }
    Ok(decode(bytes)?.1)
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode(t, dtype)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Dtype, Tensor)> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_tensor_as(path: &Path, expected: Dtype) -> Result<Tensor> {
    decode_as(&std::fs::read(path).map_err(|e| Error::io(path, e))?, expected)
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_FIXED + 4 * 8);
    f.by_ref()
        .take((HEADER_FIXED + 4 * 255) as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    decode_header(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(-2.5);
        let b = encode(&t, Dtype::F64).unwrap();
        assert_eq!(b.len(), 6 + 8);
        assert_eq!(decode(&b).unwrap(), (Dtype::F64, t));
    }

    #[test]
    fn header_layout() {
        let t = Tensor::zeros(&[3, 1, 2]);
        let b = encode(&t, Dtype::C128).unwrap();
        assert_eq!(&b[..6], &[b'F', b'C', b'T', b'1', 2, 2]);
        assert_eq!(&b[6..14], &[3, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(b.len(), 14 + 3 * 16);
    }

    #[test]
    fn truncated_payload_names_sizes() {
        let b = encode(&Tensor::zeros(&[4, 4]), Dtype::F64).unwrap();
        match decode(&b[..b.len() - 3]) {
            Err(Error::Truncated { offset, expected, actual }) => {
                assert_eq!((offset, expected, actual), (14, 142, 139));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distinct_header_errors() {
        let mut b = encode(&Tensor::zeros(&[2]), Dtype::F32).unwrap();
        assert!(matches!(decode_as(&b, Dtype::F64), Err(Error::DtypeMismatch { offset: 4, .. })));
        b[4] = 9;
        assert!(matches!(decode(&b), Err(Error::UnknownDtype { offset: 4, code: 9 })));
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::BadMagic { offset: 0, .. })));
        assert!(matches!(decode(b"FCT1\x01\x03\x01"), Err(Error::Truncated { offset: 6, .. })));
    }

    #[test]
    fn c128_needs_pair_axis() {
        assert!(encode(&Tensor::zeros(&[3]), Dtype::C128).is_err());
    }
}
