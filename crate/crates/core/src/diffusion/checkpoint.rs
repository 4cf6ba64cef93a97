//! Checkpoint directories: `meta.json` plus safetensors blobs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, ScheduleParams};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.safetensors";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub schedule: ScheduleParams,
    pub backbone: BackboneConfig,
    pub shapes: BTreeMap<String, Vec<usize>>,
    /// Free-form state owned by the writer (trainer state, config snapshot).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
}

fn to_hashmap(t: &BTreeMap<String, Tensor>) -> HashMap<String, Tensor> {
    t.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Writes into a sibling temp directory and renames it into place, so a
/// failed write leaves any previous checkpoint at `dir` untouched.
pub fn save_checkpoint(
    dir: &Path,
    meta: &CheckpointMeta,
    params: &BTreeMap<String, Tensor>,
    blobs: &[(&str, &BTreeMap<String, Tensor>)],
) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = dir.with_file_name(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let write = || -> Result<()> {
        fs::write(tmp.join(META_FILE), serde_json::to_vec_pretty(meta)?)
            .map_err(|e| Error::io(tmp.join(META_FILE), e))?;
        candle_core::safetensors::save(&to_hashmap(params), tmp.join(PARAMS_FILE))?;
        for (file, tensors) in blobs {
            candle_core::safetensors::save(&to_hashmap(tensors), tmp.join(file))?;
        }
        Ok(())
    };
    if let Err(e) = write() {
        let _ = fs::remove_dir_all(&tmp);
        return Err(Error::Checkpoint(format!("writing {}: {e}", dir.display())));
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            meta.format_version
        )));
    }
    let params = load_blob(dir, PARAMS_FILE)?;
    for (k, shape) in &meta.shapes {
        match params.get(k) {
            Some(t) if t.dims() == shape.as_slice() => {}
            _ => return Err(Error::Checkpoint(format!("parameter {k} missing or misshapen"))),
        }
    }
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        meta,
        params,
    })
}

pub fn load_blob(dir: &Path, file: &str) -> Result<BTreeMap<String, Tensor>> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing {}", path.display())));
    }
    Ok(candle_core::safetensors::load(&path, &Device::Cpu)?
        .into_iter()
        .collect())
}

pub fn shapes_of(params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Vec<usize>> {
    params.iter().map(|(k, t)| (k.clone(), t.dims().to_vec())).collect()
}
