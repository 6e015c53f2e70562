//! CMVT tensor file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4    ASCII magic "CMVT"
//! bytes 4..8    version        u32 (currently 1)
//! bytes 8..12   dtype code     u32 (0 = f32, 1 = f64)
//! bytes 12..16  ndim           u32
//! then          ndim extents   u64 each
//! then          payload, row-major, little-endian, dtype-width elements
//! ```
//!
//! Readers reject unknown magic, version, or dtype, truncated or oversized
//! payloads, and non-finite values. Round trips are bit-exact: a file read
//! and rewritten with its own dtype reproduces identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CMVT";
pub const VERSION: u32 = 1;

/// Maximum rank a reader will accept; guards against garbage headers.
const MAX_NDIM: u32 = 8;

pub fn write<F: Scalar, W: Write>(tensor: &Tensor<F>, mut out: W) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&tensor.dtype().code().to_le_bytes())?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &extent in tensor.shape() {
        out.write_all(&(extent as u64).to_le_bytes())?;
    }
    match tensor.dtype() {
        DType::F32 => {
            for &v in tensor.data() {
                out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in tensor.data() {
                out.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read<F: Scalar, R: Read>(mut input: R) -> Result<Tensor<F>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected \"CMVT\"",
            magic
        )));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let dtype_code = read_u32(&mut input)?;
    let dtype = DType::from_code(dtype_code)
        .ok_or_else(|| Error::Format(format!("unknown dtype code {dtype_code}")))?;
    let ndim = read_u32(&mut input)?;
    if ndim > MAX_NDIM {
        return Err(Error::Format(format!("ndim {ndim} exceeds limit {MAX_NDIM}")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let extent = read_u64(&mut input)?;
        let extent = usize::try_from(extent)
            .map_err(|_| Error::Format(format!("extent {extent} does not fit in usize")))?;
        count = count
            .checked_mul(extent)
            .ok_or_else(|| Error::Format("element count overflow".into()))?;
        shape.push(extent);
    }
    let mut data: Vec<F> = Vec::with_capacity(count);
    match dtype {
        DType::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..count {
                input.read_exact(&mut buf)?;
                data.push(F::cast(f64::from(f32::from_le_bytes(buf))));
            }
        }
        DType::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..count {
                input.read_exact(&mut buf)?;
                data.push(F::cast(f64::from_le_bytes(buf)));
            }
        }
    }
    // Reject trailing bytes so a payload/extents mismatch can't slip through.
    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let tensor = Tensor::new(shape, data).map_err(|e| match e {
        Error::InvalidValue(msg) => Error::Format(format!("payload: {msg}")),
        other => other,
    })?;
    Ok(tensor.with_dtype(dtype))
}

pub fn write_file<F: Scalar>(tensor: &Tensor<F>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_file<F: Scalar>(path: &Path) -> Result<Tensor<F>> {
    let file = File::open(path)?;
    read(BufReader::new(file))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
