use std::path::Path;

use super::{ModelConfig, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "DRIFTFORGE-CKPT-1";

/// Header line, u32-prefixed JSON config, then the parameter records.
pub fn checkpoint_bytes(config: &ModelConfig, params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_HEADER.as_bytes());
    out.push(b'\n');
    let cfg = serde_json::to_vec(config)?;
    out.extend((cfg.len() as u32).to_le_bytes());
    out.extend(cfg);
    out.extend(params.to_bytes());
    Ok(out)
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, checkpoint_bytes(config, params)?).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamSet)> {
    let head = CHECKPOINT_HEADER.len() + 1;
    if bytes.len() < head + 4 || &bytes[..head - 1] != CHECKPOINT_HEADER.as_bytes() || bytes[head - 1] != b'\n' {
        return Err(Error::Checkpoint(format!("missing `{CHECKPOINT_HEADER}` header")));
    }
    let len = u32::from_le_bytes(bytes[head..head + 4].try_into().expect("4 bytes")) as usize;
    let body = &bytes[head + 4..];
    if body.len() < len {
        return Err(Error::Checkpoint("truncated config".into()));
    }
    let config: ModelConfig =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let (params, used) = ParamSet::from_bytes(&body[len..])?;
    if used != body.len() - len {
        return Err(Error::Checkpoint("trailing bytes after parameter records".into()));
    }
    Ok((config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
