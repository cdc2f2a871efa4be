//! Named parameter storage shared by every model component.
//!
//! Parameters are addressed by dotted keys (`<component>.<layer>.<tensor>`) and
//! tagged either frozen or tunable. Tunable parameters are backed by a [`Var`] so
//! gradients can be taken and updates written in place; frozen parameters are
//! plain tensors that never enter the gradient graph.

use std::collections::{BTreeMap, HashMap, HashSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Frozen,
    Tunable,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub var: Option<Var>,
    pub group: Group,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Tunable variables in key order.
    pub fn tunable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries
            .iter()
            .filter_map(|(k, p)| p.var.as_ref().map(|v| (k.as_str(), v)))
    }

    pub fn keys_in(&self, group: Group) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.tensor.clone()))
            .collect()
    }

    /// SHA-256 over the keys, shapes and values of every parameter in `group`,
    /// visited in key order.
    pub fn digest(&self, group: Group) -> Result<String> {
        let mut hasher = Sha256::new();
        for (key, param) in self.entries.iter().filter(|(_, p)| p.group == group) {
            hasher.update(key.as_bytes());
            for d in param.tensor.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            let values = param
                .tensor
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn total_elements(&self, group: Group) -> usize {
        self.entries
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.elem_count())
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// `N(0, 1/fan_in)` with `fan_in` the product of all but the first dim.
    FanIn,
}

/// Creates parameters either from a seeded initializer or from a loaded archive.
///
/// Keys under a loaded prefix must be present in the archive with the exact
/// shape; everything else is freshly initialized.
pub struct ParamBuilder {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    group: Group,
    source: HashMap<String, Tensor>,
    loaded_prefixes: Vec<String>,
    used: HashSet<String>,
    store: ParamStore,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: Group::Tunable,
            source: HashMap::new(),
            loaded_prefixes: Vec::new(),
            used: HashSet::new(),
            store: ParamStore::default(),
        }
    }

    /// Registers archive tensors that must back every key starting with `prefix`.
    pub fn with_source(mut self, prefix: &str, tensors: HashMap<String, Tensor>) -> Self {
        self.loaded_prefixes.push(prefix.to_string());
        self.source.extend(tensors);
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn set_group(&mut self, group: Group) {
        self.group = group;
    }

    pub fn group(&self) -> Group {
        self.group
    }

    fn is_loaded(&self, name: &str) -> bool {
        self.loaded_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.store.entries.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let value = if self.is_loaded(name) {
            let t = self
                .source
                .get(name)
                .ok_or_else(|| Error::MissingKey(name.to_string()))?;
            if t.dims() != shape {
                return Err(Error::ShapeConflict {
                    key: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.dims().to_vec(),
                });
            }
            self.used.insert(name.to_string());
            t.to_dtype(self.dtype)?.to_device(&self.device)?
        } else {
            self.init(shape, init)?
        };
        let (tensor, var) = match self.group {
            Group::Tunable => {
                let var = Var::from_tensor(&value)?;
                (var.as_tensor().clone(), Some(var))
            }
            Group::Frozen => (value.detach(), None),
        };
        self.store.entries.insert(
            name.to_string(),
            Param {
                tensor: tensor.clone(),
                var,
                group: self.group,
            },
        );
        Ok(tensor)
    }

    fn init(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("bad init std {std}: {e}")))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::FanIn => {
                let fan_in: usize = shape.iter().skip(1).product();
                return self.init(shape, Init::Normal((fan_in.max(1) as f64).powf(-0.5)));
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Returns the populated store and any archive keys that were never requested.
    pub fn finish(self) -> (ParamStore, Vec<String>) {
        let mut unexpected: Vec<String> = self
            .source
            .keys()
            .filter(|k| !self.used.contains(*k))
            .cloned()
            .collect();
        unexpected.sort();
        for key in &unexpected {
            log::warn!("unexpected parameter `{key}` in archive");
        }
        (self.store, unexpected)
    }
}
