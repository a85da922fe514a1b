//! Binary checkpoint format.
//!
//! Layout: magic `LSERCKPT`, u32 version, u32-length-prefixed JSON config
//! block, then per-tensor records (u16 name length, name bytes, u8 rank,
//! rank x u32 dims, little-endian f32 values row-major), and a trailing
//! CRC32 of everything between the version field and the checksum.
//!
//! Tensors cover the backbone parameters plus the optimizer moments
//! (`opt.m.*`, `opt.v.*`), so a resumed run replays the original run
//! bitwise.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{init_backbone, Backbone, BackboneConfig};

use super::adamw::OptimizerState;
use super::TrainConfig;

pub const CKPT_MAGIC: &[u8; 8] = b"LSERCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected LSERCKPT")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    BadChecksum { stored: u32, computed: u32 },
    #[error("malformed config block: {0}")]
    BadConfig(String),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name} has shape {got:?}, config implies {want:?}")]
    ShapeMismatch { name: String, got: Vec<u32>, want: Vec<u32> },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("unexpected tensor {0} in checkpoint")]
    UnknownTensor(String),
    #[error("backbone config rejected: {0}")]
    Backbone(#[from] crate::backbone::ConfigError),
}

/// Everything needed to restart training at `step`.
#[derive(Debug)]
pub struct Checkpoint {
    pub backbone_config: BackboneConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub opt_step: u64,
    pub total_steps: u64,
    pub backbone: Backbone<f32>,
    pub optimizer: OptimizerState<f32>,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    backbone: BackboneConfig,
    train: TrainConfig,
    step: u64,
    opt_step: u64,
    total_steps: u64,
}

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn push_tensor(payload: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f32]) {
    payload.extend_from_slice(&(name.len() as u16).to_le_bytes());
    payload.extend_from_slice(name.as_bytes());
    payload.push(2u8);
    payload.extend_from_slice(&(rows as u32).to_le_bytes());
    payload.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let block = ConfigBlock {
        backbone: ckpt.backbone_config.clone(),
        train: ckpt.train_config.clone(),
        step: ckpt.step,
        opt_step: ckpt.opt_step,
        total_steps: ckpt.total_steps,
    };
    let config_json =
        serde_json::to_vec(&block).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    let mut payload = Vec::new();
    payload.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&config_json);
    for p in ckpt.backbone.params() {
        push_tensor(&mut payload, &p.name, p.rows, p.cols, &p.data);
    }
    for (i, p) in ckpt.backbone.params().iter().enumerate() {
        push_tensor(&mut payload, &format!("opt.m.{}", p.name), p.rows, p.cols, &ckpt.optimizer.m[i]);
        push_tensor(&mut payload, &format!("opt.v.{}", p.name), p.rows, p.cols, &ckpt.optimizer.v[i]);
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&payload)?;
    w.write_all(&crc32(&payload).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("file"));
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let payload = &bytes[12..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(payload);
    if stored != computed {
        return Err(CheckpointError::BadChecksum { stored, computed });
    }

    let mut cur = Cursor { bytes: payload, at: 0 };
    let config_len = cur.u32("config length")? as usize;
    let config_json = cur.take(config_len, "config block")?;
    let block: ConfigBlock =
        serde_json::from_slice(config_json).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    // The config implies the full tensor catalog; start from a fresh
    // initialization and overwrite every tensor from the file.
    let mut backbone: Backbone<f32> = init_backbone(&block.backbone)?;
    let mut optimizer = OptimizerState::new(backbone.params(), block.train.adamw);
    optimizer.step = block.opt_step;

    let mut remaining: std::collections::HashMap<String, Expected> = Default::default();
    for (i, p) in backbone.params().iter().enumerate() {
        remaining.insert(p.name.clone(), Expected::Param(i, p.rows as u32, p.cols as u32));
        remaining.insert(format!("opt.m.{}", p.name), Expected::MomentM(i, p.rows as u32, p.cols as u32));
        remaining.insert(format!("opt.v.{}", p.name), Expected::MomentV(i, p.rows as u32, p.cols as u32));
    }

    while cur.at < payload.len() {
        let name_len = cur.u16("tensor name length")? as usize;
        let name = String::from_utf8_lossy(cur.take(name_len, "tensor name")?).into_owned();
        let rank = cur.take(1, "tensor rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("tensor dims")?);
        }
        let count: usize = dims.iter().map(|&d| d as usize).product();
        let raw = cur.take(count * 4, "tensor values")?;

        let expected = remaining
            .remove(&name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
        let (slot_rows, slot_cols) = expected.shape();
        if dims != vec![slot_rows, slot_cols] {
            return Err(CheckpointError::ShapeMismatch {
                name,
                got: dims,
                want: vec![slot_rows, slot_cols],
            });
        }
        let mut values = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        match expected {
            Expected::Param(i, ..) => backbone.params_mut()[i].data = values,
            Expected::MomentM(i, ..) => optimizer.m[i] = values,
            Expected::MomentV(i, ..) => optimizer.v[i] = values,
        }
    }
    if let Some(name) = remaining.keys().next() {
        return Err(CheckpointError::MissingTensor(name.clone()));
    }

    Ok(Checkpoint {
        backbone_config: block.backbone,
        train_config: block.train,
        step: block.step,
        opt_step: block.opt_step,
        total_steps: block.total_steps,
        backbone,
        optimizer,
    })
}

enum Expected {
    Param(usize, u32, u32),
    MomentM(usize, u32, u32),
    MomentV(usize, u32, u32),
}

impl Expected {
    fn shape(&self) -> (u32, u32) {
        match self {
            Expected::Param(_, r, c) | Expected::MomentM(_, r, c) | Expected::MomentV(_, r, c) => (*r, *c),
        }
    }
}
