//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "EVBX"  u32 version
//! u32 text_len  text_len bytes of UTF-8 `key = value` lines
//!               (model config, iteration, lr, param_count)
//! param_count × { u32 name_len, name, u32 rank, rank × u32 dim, f32 data }
//! ```

use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::config::{apply_section, parse_lines, render_section, ConfigError, MODEL_KEYS};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVBX";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
}

/// A model snapshot plus the training position it was taken at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Parameters in canonical order.
    pub params: ParamStore<f32>,
    pub iteration: u64,
    pub lr: f64,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, iteration: u64, lr: f64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            params: model.params().clone(),
            iteration,
            lr,
        }
    }

    /// Rebuilds the model described by the checkpoint's own config.
    pub fn to_model(&self) -> Result<Model<f32>, ModelError> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    /// Loads the parameters into an explicitly given architecture; any
    /// disagreement is reported against the first offending parameter.
    pub fn to_model_with(&self, config: &ModelConfig) -> Result<Model<f32>, ModelError> {
        Model::from_params(config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = render_section(MODEL_KEYS, &self.config);
        text.push_str(&format!("iteration = {}\nlr = {}\nparam_count = {}\n", self.iteration, self.lr, self.params.len()));
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, self.format_version);
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.rank() as u32);
            for &d in p.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let text_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(text_len, "config text")?)
            .map_err(|_| CheckpointError::Format("config text is not UTF-8".into()))?;
        let mut config = ModelConfig::desk();
        let rest = apply_section(MODEL_KEYS, &mut config, &parse_lines(text)?)?;
        let field = |name: &str| {
            rest.iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| CheckpointError::Format(format!("config text lacks {name}")))
        };
        let bad = |name: &str| CheckpointError::Format(format!("unparsable {name}"));
        let iteration: u64 = field("iteration")?.parse().map_err(|_| bad("iteration"))?;
        let lr: f64 = field("lr")?.parse().map_err(|_| bad("lr"))?;
        let count: usize = field("param_count")?.parse().map_err(|_| bad("param_count"))?;
        if let Some((k, _)) = rest.iter().find(|(k, _)| !["iteration", "lr", "param_count"].contains(&k.as_str())) {
            return Err(CheckpointError::Format(format!("unknown config key {k:?}")));
        }

        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32("parameter name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|_| CheckpointError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("parameter rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("parameter shape")? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= r.remaining() / 4).ok_or(CheckpointError::Truncated("parameter data"))?;
            let data = r
                .take(4 * n, "parameter data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
            if params.id(&name).is_some() {
                return Err(CheckpointError::Format(format!("duplicate parameter {name}")));
            }
            let trainable = !name.contains(".running_");
            params.insert(name, value, trainable);
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            format_version: version,
            config,
            params,
            iteration,
            lr,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes via a temporary sibling file so a crash never leaves a partial
/// checkpoint under the final name.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, checkpoint.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
