//! Flat binary embedding files: `C2EV`, version, count, dim, then
//! `count × dim` little-endian doubles.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"C2EV";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 8;

pub fn to_bytes(rows: &[Vec<f64>], dim: usize) -> Result<Vec<u8>> {
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::shape("embeddings", &[r.len()], &[dim]));
    }
    let mut out = Vec::with_capacity(HEADER + rows.len() * dim * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for v in rows.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decoded file contents, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingFile {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingFile> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an embedding file".into()));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported embedding file version {version}")));
    }
    let (count, dim) = (u64_at(8) as usize, u64_at(16) as usize);
    let expect = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| Error::Format("embedding header overflows".into()))?;
    if bytes.len() != expect {
        return Err(Error::Format(format!("expected {expect} bytes, found {}", bytes.len())));
    }
    let data = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(EmbeddingFile { count, dim, data })
}

pub fn save(path: &Path, rows: &[Vec<f64>], dim: usize) -> Result<()> {
    let bytes = to_bytes(rows, dim)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<EmbeddingFile> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
