//! MVF: a self-describing little-endian tensor file.
//!
//! ```text
//! bytes 0..4   b"MVF1"
//! u32          dtype code (1 = f32)
//! u32          rank
//! u64 x rank   dims
//! f32 x prod(dims) payload, row-major
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MVF1";
pub const DTYPE_F32: u32 = 1;

pub fn encode(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * tensor.rank() + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    let bad = |d: String| Error::format("MVF file", d);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let dtype = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unknown dtype code {dtype}")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_len = 12 + 8 * rank;
    if bytes.len() < header_len {
        return Err(bad("truncated header".into()));
    }
    let dims = (0..rank)
        .map(|i| {
            let at = 12 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
        })
        .collect();
    Ok((dims, header_len))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (dims, header_len) = parse_header(bytes)?;
    let n: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() != n * 4 {
        return Err(Error::format(
            "MVF file",
            format!("payload is {} bytes, dims {dims:?} need {}", payload.len(), n * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn mvf_write(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    if !tensor.all_finite() {
        return Err(Error::contract(format!(
            "{}: refusing to write non-finite values",
            path.display()
        )));
    }
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn mvf_read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { what, detail } => Error::format(what, format!("{}: {detail}", path.display())),
        other => other,
    })
}

/// Reads only the dims of an MVF file.
pub fn mvf_dims(path: &Path) -> Result<Vec<usize>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head)
        .map_err(|_| Error::format("MVF file", format!("{}: truncated header", path.display())))?;
    let rank = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut rest = vec![0u8; 8 * rank];
    f.read_exact(&mut rest)
        .map_err(|_| Error::format("MVF file", format!("{}: truncated header", path.display())))?;
    let mut all = head.to_vec();
    all.extend_from_slice(&rest);
    Ok(parse_header(&all)?.0)
}
