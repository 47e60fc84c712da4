//! PTF, a minimal portable tensor file.
//!
//! Layout: magic `PTF1` (4 bytes), dtype code (1 byte: 0 = f32, 1 = u32,
//! 2 = f64), ndim (1 byte), ndim × u32 little-endian dims, then the payload
//! row-major little-endian. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PTF1";

/// Dims are capped so a corrupt header cannot trigger a huge allocation.
const MAX_NDIM: usize = 8;
const MAX_ELEMS: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::U32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        4 * if self == Dtype::F64 { 2 } else { 1 }
    }
}

/// An owned tensor of one of the three supported dtypes.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    U32(ArrayD<u32>),
    F64(ArrayD<f64>),
}

impl Tensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            Tensor::F32(_) => Dtype::F32,
            Tensor::U32(_) => Dtype::U32,
            Tensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::U32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
        }
    }

    pub fn as_f32(&self) -> Result<&ArrayD<f32>> {
        match self {
            Tensor::F32(a) => Ok(a),
            other => Err(Error::Shape(format!(
                "expected f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_u32(&self) -> Result<&ArrayD<u32>> {
        match self {
            Tensor::U32(a) => Ok(a),
            other => Err(Error::Shape(format!(
                "expected u32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_f64(&self) -> Result<&ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a),
            other => Err(Error::Shape(format!(
                "expected f64 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    /// 2D f32 view with an owning copy, for image slices.
    pub fn into_f32_2d(self) -> Result<Array2<f32>> {
        match self {
            Tensor::F32(a) => a
                .into_dimensionality()
                .map_err(|e| Error::Shape(format!("expected 2D tensor: {e}"))),
            other => Err(Error::Shape(format!(
                "expected 2D f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_u32_2d(self) -> Result<Array2<u32>> {
        match self {
            Tensor::U32(a) => a
                .into_dimensionality()
                .map_err(|e| Error::Shape(format!("expected 2D tensor: {e}"))),
            other => Err(Error::Shape(format!(
                "expected 2D u32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

fn standard_elems<T: Clone>(a: &ArrayD<T>) -> Vec<T> {
    a.iter().cloned().collect()
}

/// Serialize a tensor to a writer.
pub fn write(w: &mut impl Write, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[tensor.dtype() as u8])?;
    let shape = tensor.shape();
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match tensor {
        Tensor::F32(a) => {
            for v in standard_elems(a) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::U32(a) => {
            for v in standard_elems(a) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::F64(a) => {
            for v in standard_elems(a) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Parse a tensor from bytes. `context` names the source in errors.
pub fn read_bytes(bytes: &[u8], context: &str) -> Result<Tensor> {
    let need = |offset: usize, n: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + n).ok_or_else(|| {
            Error::format(
                context,
                bytes.len() as u64,
                format!("truncated: expected {} bytes at offset {}", n, offset),
            )
        })
    };

    let magic = need(0, 4)?;
    if magic != MAGIC {
        return Err(Error::format(
            context,
            0,
            format!("bad magic {:02x?}, expected {:02x?}", magic, MAGIC),
        ));
    }
    let code = need(4, 1)?[0];
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| Error::format(context, 4, format!("unknown dtype code {code}")))?;
    let ndim = need(5, 1)?[0] as usize;
    if ndim > MAX_NDIM {
        return Err(Error::format(
            context,
            5,
            format!("ndim {ndim} exceeds limit {MAX_NDIM}"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut elems: u64 = 1;
    for i in 0..ndim {
        let off = 6 + 4 * i;
        let raw = need(off, 4)?;
        let d = u32::from_le_bytes(raw.try_into().unwrap());
        elems = elems.saturating_mul(u64::from(d));
        if elems > MAX_ELEMS {
            return Err(Error::format(
                context,
                off as u64,
                format!("element count exceeds limit {MAX_ELEMS}"),
            ));
        }
        dims.push(d as usize);
    }
    let payload_off = 6 + 4 * ndim;
    let expected = elems as usize * dtype.size();
    let payload = bytes.get(payload_off..).unwrap_or(&[]);
    if payload.len() != expected {
        return Err(Error::format(
            context,
            payload_off as u64,
            format!(
                "payload length {} does not match dims product {} x {} bytes",
                payload.len(),
                elems,
                dtype.size()
            ),
        ));
    }

    let shape = IxDyn(&dims);
    Ok(match dtype {
        Dtype::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::F32(ArrayD::from_shape_vec(shape, data).unwrap())
        }
        Dtype::U32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::U32(ArrayD::from_shape_vec(shape, data).unwrap())
        }
        Dtype::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::F64(ArrayD::from_shape_vec(shape, data).unwrap())
        }
    })
}

pub fn write_file(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write(&mut w, tensor).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    read_bytes(&bytes, &path.display().to_string())
}

pub fn to_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write(&mut out, tensor).expect("writing to Vec cannot fail");
    out
}
