//! TRKF tensor container.
//!
//! Each record is a 32-byte little-endian header followed by the row-major
//! payload:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"TRKF"`                |
//! | 4      | 4    | format version (`1`)           |
//! | 8      | 4    | dtype: `1` = f32, `2` = f64    |
//! | 12     | 4    | rank (0..=4)                   |
//! | 16     | 16   | four u32 dims, unused ones `0` |
//!
//! Feature files hold one record; checkpoints concatenate several.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TRKF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Appends one encoded record to `out`.
pub fn encode(tensor: &Tensor, dtype: Dtype, out: &mut Vec<u8>) -> Result<()> {
    let shape = tensor.shape();
    if shape.len() > MAX_RANK {
        return Err(Error::invalid(format!(
            "TRKF stores at most rank {MAX_RANK}, got shape {shape:?}"
        )));
    }
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for i in 0..MAX_RANK {
        let d = shape.get(i).copied().unwrap_or(0);
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Decodes the record starting at `offset`, returning it and the offset just
/// past it. Error messages give absolute byte positions.
pub fn decode(bytes: &[u8], offset: usize) -> std::result::Result<(Tensor, usize), String> {
    let header = bytes
        .get(offset..offset + HEADER_LEN)
        .ok_or_else(|| format!("truncated header at byte {offset}"))?;
    if let Some(i) = (0..4).find(|&i| header[i] != MAGIC[i]) {
        return Err(format!(
            "bad magic at byte {}: expected {:#04x}, found {:#04x}",
            offset + i,
            MAGIC[i],
            header[i]
        ));
    }
    let version = u32_at(header, 4);
    if version != VERSION {
        return Err(format!("unsupported version {version} at byte {}", offset + 4));
    }
    let dtype = Dtype::from_code(u32_at(header, 8))
        .ok_or_else(|| format!("unknown dtype code {} at byte {}", u32_at(header, 8), offset + 8))?;
    let rank = u32_at(header, 12) as usize;
    if rank > MAX_RANK {
        return Err(format!("rank {rank} exceeds {MAX_RANK} at byte {}", offset + 12));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u32_at(header, 16 + 4 * i) as usize).collect();
    if let Some(i) = shape.iter().position(|&d| d == 0) {
        return Err(format!("zero dimension at byte {}", offset + 16 + 4 * i));
    }
    let n: usize = shape.iter().product();
    let start = offset + HEADER_LEN;
    let end = start + n * dtype.width();
    let payload = bytes.get(start..end).ok_or_else(|| {
        format!(
            "payload for shape {shape:?} needs {} bytes from byte {start}, file has {}",
            n * dtype.width(),
            bytes.len().saturating_sub(start)
        )
    })?;
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((tensor, end))
}

pub fn write_tensors(path: &Path, tensors: &[&Tensor], dtype: Dtype) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        encode(t, dtype, &mut buf)?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    write_tensors(path, &[tensor], dtype)
}

/// Reads every record in the file.
pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (t, next) = decode(&bytes, at).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })?;
        out.push(t);
        at = next;
    }
    Ok(out)
}

/// Reads a file that must hold exactly one record.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut all = read_tensors(path)?;
    if all.len() != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected one tensor record, found {}", all.len()),
        });
    }
    Ok(all.pop().unwrap())
}
