//! Named-tensor archive: the on-disk checkpoint format.
//!
//! Layout of a single archive file:
//!
//! ```text
//! [u64 LE manifest byte length][manifest JSON][blob of f64 LE values]
//! ```
//!
//! The manifest carries an arbitrary `meta` object (model config, hashes)
//! plus one entry per tensor with its name, shape, and byte offset into the
//! blob. Offsets are relative to the start of the blob.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Matrix;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive io: {0}")]
    Io(#[from] std::io::Error),
    #[error("archive manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("archive corrupt: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

pub fn write_archive(
    path: &Path,
    meta: serde_json::Value,
    tensors: &[(String, &Matrix)],
) -> Result<(), ArchiveError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += (m.len() * 8) as u64;
    }
    let manifest = Manifest {
        kind: "tensor-archive".to_string(),
        version: 1,
        meta,
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, m) in tensors {
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(serde_json::Value, Vec<(String, Matrix)>), ArchiveError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)?;
    let manifest_len = u64::from_le_bytes(len_buf) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.kind != "tensor-archive" {
        return Err(ArchiveError::Corrupt(format!(
            "unexpected archive kind {:?}",
            manifest.kind
        )));
    }

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n = entry.rows * entry.cols;
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(ArchiveError::Corrupt(format!(
                "tensor {:?} range {start}..{end} exceeds blob length {}",
                entry.name,
                blob.len()
            )));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((
            entry.name.clone(),
            Matrix::from_vec(entry.rows, entry.cols, data),
        ));
    }
    Ok((manifest.meta, tensors))
}
