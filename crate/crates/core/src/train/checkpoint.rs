//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ASTRALAB1"                     magic, 9 bytes
//! u32                             format version
//! u64 + bytes                     TOML config snapshot
//! u8                              stage (0 pretrain, 1 align, 2 downstream)
//! u64                             step count
//! [u8; 32] + u64 + u128           rng seed, stream, word position
//! arrays                          raw little-endian element data, back to back
//! u32 count, then per array:      u32 name length, name, u8 dtype width,
//!                                 u64 rows, u64 cols, u64 byte offset
//! u64                             byte offset of the index
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::config::AstraConfig;

pub const MAGIC: &[u8; 9] = b"ASTRALAB1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Align,
    Downstream,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Align => "align",
            Stage::Downstream => "downstream",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Align => 1,
            Stage::Downstream => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Stage> {
        [Stage::Pretrain, Stage::Align, Stage::Downstream].into_iter().find(|s| s.tag() == t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: AstraConfig,
    pub stage: Stage,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml_string();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.push(self.stage.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let mut index = Vec::new();
        for (_, name, value) in self.params.iter() {
            index.push((name.to_string(), value.rows(), value.cols(), out.len()));
            for &x in value.data() {
                x.write_le(&mut out);
            }
        }
        let index_offset = out.len() as u64;
        out.extend_from_slice(&(index.len() as u32).to_le_bytes());
        for (name, rows, cols, offset) in index {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::BYTES as u8);
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
            out.extend_from_slice(&(offset as u64).to_le_bytes());
        }
        out.extend_from_slice(&index_offset.to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|reason| AstraError::Format { path: path.to_path_buf(), reason })
    }

    /// Parses a container; arrays stored at the other precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("bad magic header".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let cfg_len = r.u64()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| e.to_string())?;
        let config = AstraConfig::from_toml_str(cfg_text).map_err(|e| e.to_string())?;
        let stage = Stage::from_tag(r.u8()?).ok_or("unknown stage tag")?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if bytes.len() < 8 {
            return Err("truncated file".into());
        }
        let index_offset = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
        let mut idx = Reader { bytes: &bytes[..bytes.len() - 8], pos: index_offset };
        let count = idx.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = idx.u32()? as usize;
            let name = std::str::from_utf8(idx.take(name_len)?).map_err(|e| e.to_string())?.to_string();
            let width = idx.u8()? as usize;
            let rows = idx.u64()? as usize;
            let cols = idx.u64()? as usize;
            let offset = idx.u64()? as usize;
            let n = rows * cols;
            let end = offset + n * width;
            if end > index_offset {
                return Err(format!("array {name} overruns the data section"));
            }
            let raw = &bytes[offset..end];
            let data: Vec<T> = match width {
                4 => raw.chunks_exact(4).map(|c| T::c(f32::read_le(c) as f64)).collect(),
                8 => raw.chunks_exact(8).map(|c| T::c(f64::read_le(c))).collect(),
                w => return Err(format!("array {name} has unsupported element width {w}")),
            };
            if params.id(&name).is_some() {
                return Err(format!("duplicate array {name}"));
            }
            params.insert(name, Tensor::from_vec(rows, cols, data));
        }
        Ok(Checkpoint { config, stage, step, rng: RngState { seed, stream, word_pos }, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
