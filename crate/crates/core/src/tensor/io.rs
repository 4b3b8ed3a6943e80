//! Tensor file format.
//!
//! ```text
//! "EQT1" | dtype u8 (0=f32, 1=f64, 2=i64) | ndim u8 | ndim x u32 LE dims | payload LE, row-major
//! ```

use std::fs;
use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EQT1";

/// A tensor of whichever dtype a file declared.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64(Tensor<i64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::I64(_) => DType::I64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
            AnyTensor::I64(t) => t.dims(),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::shape(format!("rank {} exceeds 255", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + T::DTYPE.size() * t.len());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("axis length {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

struct Header {
    dtype: DType,
    dims: Vec<usize>,
    len: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 6 {
        return Err(Error::format(
            bytes.len() as u64,
            format!("header needs 6 bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::format(4, format!("unknown dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err(Error::format(5, "ndim must be at least 1"));
    }
    let len = 6 + 4 * ndim;
    if bytes.len() < len {
        return Err(Error::format(
            bytes.len() as u64,
            format!("dims need {len} header bytes, file has {}", bytes.len()),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for i in 0..ndim {
        let at = 6 + 4 * i;
        let d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(Error::format(at as u64, "zero-length axis"));
        }
        count = count
            .checked_mul(d as u64)
            .ok_or_else(|| Error::format(at as u64, "element count overflows"))?;
        dims.push(d);
    }
    let payload = count
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| Error::format(len as u64, "payload size overflows"))?;
    let actual = (bytes.len() - len) as u64;
    if actual != payload {
        return Err(Error::format(
            len as u64 + actual.min(payload),
            format!("expected {payload} payload bytes, found {actual}"),
        ));
    }
    Ok(Header { dtype, dims, len })
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let h = parse_header(bytes)?;
    let body = &bytes[h.len..];
    Ok(match h.dtype {
        DType::F32 => AnyTensor::F32(decode_body(h.dims, body)?),
        DType::F64 => AnyTensor::F64(decode_body(h.dims, body)?),
        DType::I64 => AnyTensor::I64(decode_body(h.dims, body)?),
    })
}

/// Decode a buffer that must hold element type `T`.
pub fn decode_as<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = parse_header(bytes)?;
    if h.dtype != T::DTYPE {
        return Err(Error::format(
            4,
            format!("expected dtype {}, file holds {}", T::DTYPE, h.dtype),
        ));
    }
    decode_body(h.dims, &bytes[h.len..])
}

fn decode_body<T: Element>(dims: Vec<usize>, body: &[u8]) -> Result<Tensor<T>> {
    let data = body
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::from(e).at(path))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    decode(&bytes).map_err(|e| e.at(path))
}

/// Read a tensor and require it to have element type `T`.
pub fn read_tensor_as<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    decode_as(&bytes).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.eqt");
        let t = Tensor::new(vec![2, 3], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3e38, -7.25, 0.1])
            .unwrap();
        write_tensor(&path, &t).unwrap();
        let back: Tensor<f32> = read_tensor_as(&path).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![7i64, -1]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..4], b"EQT1");
        assert_eq!(bytes[4], 2);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 14 + 16);
        assert_eq!(decode(&bytes).unwrap(), AnyTensor::I64(t));
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode(&Tensor::scalar(1.0f64)).unwrap();
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_dtype_code() {
        let mut bytes = encode(&Tensor::scalar(1.0f64)).unwrap();
        bytes[4] = 9;
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let t = Tensor::new(vec![2, 3], vec![0.0f32; 6]).unwrap();
        let bytes = encode(&t).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        let err = decode(cut).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 24 payload bytes, found 19"), "{msg}");
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 14 + 19),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.eqt");
        write_tensor(&path, &Tensor::scalar(1.0f64)).unwrap();
        assert!(read_tensor_as::<f32>(&path).is_err());
    }
}
