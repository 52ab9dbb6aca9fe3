//! Checkpoint file layout:
//!
//! ```text
//! "LFCKPT" | version: u8 | header_len: u32 LE | header: UTF-8 JSON | params: f64 LE * n
//! ```
//!
//! The JSON header carries everything except the parameters, including
//! `param_count`, which must match the trailing block exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Monitor, NnError, Result};
use crate::data::{WeightMode, NUM_CLASSES};
use crate::imaging::AugmentConfig;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"LFCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub epoch: usize,
    pub metric: f64,
    pub monitor: Monitor,
    pub class_order: Vec<String>,
    pub seed: u64,
    pub init_seed: u64,
    pub weight_mode: WeightMode,
    pub class_weights: [f64; NUM_CLASSES],
    pub augment: AugmentConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    epoch: usize,
    metric: f64,
    monitor: Monitor,
    class_order: Vec<String>,
    seed: u64,
    init_seed: u64,
    weight_mode: WeightMode,
    class_weights: [f64; NUM_CLASSES],
    augment: AugmentConfig,
    param_count: usize,
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::CorruptCheckpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(c: &Checkpoint, mut w: W) -> Result<()> {
    let header = Header {
        spec: c.spec.clone(),
        epoch: c.epoch,
        metric: c.metric,
        monitor: c.monitor,
        class_order: c.class_order.clone(),
        seed: c.seed,
        init_seed: c.init_seed,
        weight_mode: c.weight_mode.clone(),
        class_weights: c.class_weights,
        augment: c.augment.clone(),
        param_count: c.params.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut buf = Vec::with_capacity(11 + json.len() + 8 * c.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in &c.params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 11 {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    if bytes[6] != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            bytes[6]
        )));
    }
    let len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let body = &bytes[11..];
    if body.len() < len {
        return Err(corrupt(format!("header needs {len} bytes, {} present", body.len())));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| corrupt(format!("header: {e}")))?;
    let block = &body[len..];
    if block.len() != header.param_count * 8 {
        return Err(corrupt(format!(
            "parameter block has {} bytes, expected {}",
            block.len(),
            header.param_count * 8
        )));
    }
    let params = block
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Checkpoint {
        spec: header.spec,
        params,
        epoch: header.epoch,
        metric: header.metric,
        monitor: header.monitor,
        class_order: header.class_order,
        seed: header.seed,
        init_seed: header.init_seed,
        weight_mode: header.weight_mode,
        class_weights: header.class_weights,
        augment: header.augment,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    write_checkpoint(c, std::fs::File::create(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::fs::File::open(path)?)
}
