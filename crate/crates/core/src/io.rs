//! PLXT binary tensor container.
//!
//! Layout: magic bytes `PLXT`, one u8 dtype code (0 = f32, 1 = f64), one u8
//! ndim, then ndim little-endian u64 extents, then the payload scalars in
//! little-endian row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PLXT";

/// A loaded tensor of either width.
#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.to_f64(),
            AnyTensor::F64(t) => t.clone(),
        }
    }
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[T::DTYPE.code(), t.dims().len() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match T::DTYPE {
        Dtype::F32 => {
            for &x in t.data() {
                w.write_all(&(x.to_f64() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &x in t.data() {
                w.write_all(&x.to_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"PLXT\"",
            magic
        )));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = Dtype::from_code(head[0])?;
    let ndim = head[1] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    match dtype {
        Dtype::F32 => {
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            Ok(AnyTensor::F32(Tensor::from_vec(&dims, data)?))
        }
        Dtype::F64 => {
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            Ok(AnyTensor::F64(Tensor::from_vec(&dims, data)?))
        }
    }
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<AnyTensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}
