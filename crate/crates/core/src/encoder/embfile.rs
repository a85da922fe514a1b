//! Binary embedding dump.
//!
//! Layout: magic `LSEREMB1`, u32 count N, u32 dim m (both little-endian),
//! then `N * m` little-endian f32 values row-major, then N null-terminated
//! doc-id strings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const EMB_MAGIC: &[u8; 8] = b"LSEREMB1";

#[derive(Debug, Error)]
pub enum EmbFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected LSEREMB1")]
    BadMagic,
    #[error("embedding count {ids} does not match id count {embs}")]
    CountMismatch { ids: usize, embs: usize },
    #[error("row {row} has dimension {got}, expected {want}")]
    RaggedRow { row: usize, got: usize, want: usize },
    #[error("doc id {0} contains a NUL byte")]
    NulInId(usize),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
}

pub fn write_embeddings(
    path: &Path,
    ids: &[String],
    embeddings: &[Vec<f32>],
) -> Result<(), EmbFileError> {
    if ids.len() != embeddings.len() {
        return Err(EmbFileError::CountMismatch { ids: ids.len(), embs: embeddings.len() });
    }
    let dim = embeddings.first().map_or(0, |e| e.len());
    for (row, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(EmbFileError::RaggedRow { row, got: e.len(), want: dim });
        }
    }
    for (i, id) in ids.iter().enumerate() {
        if id.as_bytes().contains(&0) {
            return Err(EmbFileError::NulInId(i));
        }
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMB_MAGIC)?;
    w.write_all(&(ids.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for e in embeddings {
        for v in e {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for id in ids {
        w.write_all(id.as_bytes())?;
        w.write_all(&[0])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<Vec<f32>>), EmbFileError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| EmbFileError::Truncated("magic"))?;
    if &magic != EMB_MAGIC {
        return Err(EmbFileError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| EmbFileError::Truncated("count"))?;
    let n = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(|_| EmbFileError::Truncated("dim"))?;
    let dim = u32::from_le_bytes(u32buf) as usize;

    let mut embeddings = Vec::with_capacity(n);
    let mut f32buf = [0u8; 4];
    for _ in 0..n {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut f32buf).map_err(|_| EmbFileError::Truncated("values"))?;
            row.push(f32::from_le_bytes(f32buf));
        }
        embeddings.push(row);
    }

    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let mut ids = Vec::with_capacity(n);
    let mut start = 0;
    for _ in 0..n {
        let end = rest[start..]
            .iter()
            .position(|&b| b == 0)
            .ok_or(EmbFileError::Truncated("doc ids"))?
            + start;
        ids.push(String::from_utf8_lossy(&rest[start..end]).into_owned());
        start = end + 1;
    }
    Ok((ids, embeddings))
}
