//! Checkpoint files.
//!
//! Layout: magic `FSCK`, format version (u32 LE), header length (u32 LE),
//! JSON header, then one block per entry of `header.blocks`, each a u32 LE
//! count followed by that many little-endian IEEE-754 f32 values. Blocks are
//! the flat parameter vector and the optimizer velocity, in that order, so a
//! resumed run continues bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::ChannelStats;
use crate::error::{Error, Result};
use crate::learner::{ArchConfig, HeadKind, ModelParams, OptState, Precision, Real};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub head: HeadKind,
    pub stats: ChannelStats,
    pub precision: Precision,
    pub seed: u64,
    pub epoch: usize,
    pub blocks: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub velocity: Vec<f32>,
}

impl Checkpoint {
    pub fn from_state<T: Real>(
        params: &ModelParams<T>,
        opt: &OptState<T>,
        head: HeadKind,
        stats: &ChannelStats,
        seed: u64,
        epoch: usize,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                arch: params.arch.clone(),
                head,
                stats: stats.clone(),
                precision: T::PRECISION,
                seed,
                epoch,
                blocks: vec!["params".into(), "velocity".into()],
            },
            params: params.data.iter().map(|&v| v.to_f64() as f32).collect(),
            velocity: opt.velocity.iter().map(|&v| v.to_f64() as f32).collect(),
        }
    }

    pub fn restore<T: Real>(&self) -> Result<(ModelParams<T>, OptState<T>)> {
        if self.params.len() != self.header.arch.param_count() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, architecture expects {}",
                self.params.len(),
                self.header.arch.param_count()
            )));
        }
        let params = ModelParams {
            arch: self.header.arch.clone(),
            data: self.params.iter().map(|&v| T::from_f32(v)).collect(),
        };
        let opt = OptState {
            velocity: self.velocity.iter().map(|&v| T::from_f32(v)).collect(),
        };
        Ok((params, opt))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header_json = serde_json::to_vec(&ckpt.header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + 4 * (ckpt.params.len() + ckpt.velocity.len()));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for block in [&ckpt.params, &ckpt.velocity] {
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        for v in block.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let fail = |reason: &str| Error::CorruptBlob {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic or truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail("unsupported checkpoint version"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(fail("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])?;
    if header.blocks != ["params", "velocity"] {
        return Err(fail("unexpected block list"));
    }

    let mut cursor = 12 + header_len;
    let mut read_block = || -> Result<Vec<f32>> {
        if bytes.len() < cursor + 4 {
            return Err(fail("truncated block count"));
        }
        let count = u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap()) as usize;
        cursor += 4;
        if bytes.len() < cursor + 4 * count {
            return Err(fail("truncated block payload"));
        }
        let mut block = Vec::with_capacity(count);
        for i in 0..count {
            let off = cursor + 4 * i;
            block.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        cursor += 4 * count;
        Ok(block)
    };
    let params = read_block()?;
    let velocity = read_block()?;
    Ok(Checkpoint {
        header,
        params,
        velocity,
    })
}
