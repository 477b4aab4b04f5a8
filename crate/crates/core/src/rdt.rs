//! RDT binary tensor file format (little-endian):
//! magic "RDT1" (4 bytes), dtype u8 (0=f32, 1=u8, 2=i32), rank u8,
//! reserved u16 = 0, rank x u32 dims, then row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Float, Tensor};

pub const MAGIC: [u8; 4] = *b"RDT1";

#[derive(Clone, Debug, PartialEq)]
pub enum RdtTensor {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    U8 { dims: Vec<usize>, data: Vec<u8> },
    I32 { dims: Vec<usize>, data: Vec<i32> },
}

impl RdtTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            RdtTensor::F32 { dims, .. } | RdtTensor::U8 { dims, .. } | RdtTensor::I32 { dims, .. } => {
                dims
            }
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            RdtTensor::F32 { .. } => 0,
            RdtTensor::U8 { .. } => 1,
            RdtTensor::I32 { .. } => 2,
        }
    }

    pub fn from_tensor<E: Float>(t: &Tensor<E>) -> Self {
        RdtTensor::F32 {
            dims: t.dims().to_vec(),
            data: t.data().iter().map(|v| v.to_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<E: Float>(&self) -> Result<Tensor<E>> {
        match self {
            RdtTensor::F32 { dims, data } => Tensor::new(
                dims.clone(),
                data.iter().map(|&v| E::from_f64(v as f64)).collect(),
            ),
            _ => Err(Error::InvalidArg(
                "expected an f32 tensor payload".to_string(),
            )),
        }
    }
}

pub fn write_rdt<W: Write>(w: &mut W, t: &RdtTensor) -> Result<()> {
    let dims = t.dims();
    if dims.len() > u8::MAX as usize {
        return Err(Error::InvalidArg(format!("rank {} exceeds u8", dims.len())));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[t.dtype_code(), dims.len() as u8])?;
    w.write_all(&0u16.to_le_bytes())?;
    for &d in dims {
        if d > u32::MAX as usize {
            return Err(Error::InvalidArg(format!("dim {d} exceeds u32")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match t {
        RdtTensor::F32 { data, .. } => {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        RdtTensor::U8 { data, .. } => w.write_all(data)?,
        RdtTensor::I32 { data, .. } => {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read exactly `expected` bytes; a short read is a distinct truncation error
/// naming expected vs actual length.
fn read_payload<R: Read>(r: &mut R, expected: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; expected];
    let mut got = 0usize;
    while got < expected {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return Err(Error::Truncated { expected, actual: got });
        }
        got += n;
    }
    Ok(buf)
}

pub fn read_rdt<R: Read>(r: &mut R) -> Result<RdtTensor> {
    let mut magic = [0u8; 4];
    let mut got = 0usize;
    while got < 4 {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            return Err(Error::Truncated { expected: 4, actual: got });
        }
        got += n;
    }
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let head = read_payload(r, 4)?;
    let dtype = head[0];
    let rank = head[1] as usize;
    // head[2..4] is the reserved u16; ignored on read.
    let dim_bytes = read_payload(r, rank * 4)?;
    let dims: Vec<usize> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = numel_of(&dims);
    match dtype {
        0 => {
            let raw = read_payload(r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(RdtTensor::F32 { dims, data })
        }
        1 => {
            let data = read_payload(r, n)?;
            Ok(RdtTensor::U8 { dims, data })
        }
        2 => {
            let raw = read_payload(r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(RdtTensor::I32 { dims, data })
        }
        other => Err(Error::BadDtype(other)),
    }
}

pub fn save_rdt<P: AsRef<Path>>(t: &RdtTensor, path: P) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rdt(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_rdt<P: AsRef<Path>>(path: P) -> Result<RdtTensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_rdt(&mut r)
}
