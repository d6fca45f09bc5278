//! The FMT1 tensor file format.
//!
//! Layout: the 8-byte magic `FMTENSR1`, one dtype byte (0 = f32, 1 = f64),
//! one rank byte, `rank` little-endian u32 extents, then the scalars in
//! row-major order, little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const FMT_MAGIC: &[u8; 8] = b"FMTENSR1";

/// A tensor loaded without knowing its dtype in advance.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts into the requested element type, rounding if necessary.
    pub fn into_scalar<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut impl Write) -> Result<()> {
    out.write_all(FMT_MAGIC)?;
    out.write_all(&[T::DTYPE.code(), t.rank() as u8])?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        out.write_all(&e.to_le_bytes())?;
    }
    match T::DTYPE {
        DType::F32 => {
            for v in t.data() {
                out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for v in t.data() {
                out.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn decode(input: &mut impl Read) -> Result<AnyTensor> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != FMT_MAGIC {
        return Err(Error::Format("bad magic, not an FMT1 tensor".into()));
    }
    let mut head = [0u8; 2];
    input.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[0])))?;
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let tensor = match dtype {
        DType::F32 => {
            let mut raw = vec![0u8; n * 4];
            input.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F32(Tensor::from_vec(&shape, data)?)
        }
        DType::F64 => {
            let mut raw = vec![0u8; n * 8];
            input.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F64(Tensor::from_vec(&shape, data)?)
        }
    };
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Ok(tensor)
}

pub fn write_fmt<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_fmt_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut r = BufReader::new(File::open(path)?);
    decode(&mut r)
}

/// Reads a tensor and converts it to `T`.
pub fn read_fmt<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(read_fmt_any(path)?.into_scalar())
}
