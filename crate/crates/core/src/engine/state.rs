use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, save_archive};
use crate::error::{Error, Result};
use crate::params::Group;

use super::config::Setup;
use super::model::MaskClip;
use super::optim::Adam;

/// Bumped whenever the checkpoint layout changes.
pub const FORMAT_VERSION: u32 = 1;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const META_FILE: &str = "state.json";

/// Model, optimizer moments and the run configuration.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: MaskClip,
    pub setup: Setup,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    dtype: String,
    step: u64,
    epoch: usize,
    seed: u64,
    setup: Setup,
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Validation(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

impl ModelState {
    pub fn init(setup: &Setup, dtype: DType, device: &Device) -> Result<Self> {
        setup.validate()?;
        Ok(Self {
            model: MaskClip::new(&setup.model, setup.seed, dtype, device)?,
            setup: setup.clone(),
            optimizer: Adam::new(&setup.train),
            epoch: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// SHA-256 of the frozen group (semantic and text encoders).
    pub fn frozen_digest(&self) -> Result<String> {
        self.model.store.digest(Group::Frozen)
    }

    /// Writes `params.safetensors` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors = self.model.store.tensors();
        tensors.extend(self.optimizer.tensors());
        save_archive(&dir.join(PARAMS_FILE), &tensors)?;
        let meta = Meta {
            format_version: FORMAT_VERSION,
            dtype: self.model.dtype().as_str().to_string(),
            step: self.step(),
            epoch: self.epoch,
            seed: self.setup.seed,
            setup: self.setup.clone(),
        };
        let path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Validation(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: meta.format_version,
            });
        }
        let dtype = parse_dtype(&meta.dtype)?;
        let (optim, params): (HashMap<_, _>, HashMap<_, _>) = load_archive(&dir.join(PARAMS_FILE), device)?
            .into_iter()
            .partition(|(k, _)| k.starts_with("optim."));
        let model = MaskClip::from_tensors(&meta.setup.model, params, dtype, device)?;
        let mut optimizer = Adam::new(&meta.setup.train);
        optimizer.restore(&optim, meta.step)?;
        Ok(Self {
            model,
            setup: meta.setup,
            optimizer,
            epoch: meta.epoch,
        })
    }
}
