//! Flat named-array checkpoint container.
//!
//! The on-disk layout is the safetensors format: an 8-byte little-endian
//! header length, a JSON header mapping each key to `{dtype, shape,
//! data_offsets}`, then the raw little-endian payloads. Keys follow
//! `<component>.<layer>.<tensor>`, e.g. `semantic.blocks.3.attn.q.weight`,
//! `spm.vca.0.proj.weight` or `decoder.scale_2.conv.weight`.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

pub fn save_archive(path: &Path, tensors: &HashMap<String, Tensor>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    candle_core::safetensors::save(tensors, path)?;
    Ok(())
}

pub fn load_archive(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    candle_core::safetensors::load_buffer(&bytes, device).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Keeps only the entries under `prefix`.
pub fn select_prefix(tensors: HashMap<String, Tensor>, prefix: &str) -> HashMap<String, Tensor> {
    tensors
        .into_iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .collect()
}
