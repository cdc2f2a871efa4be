use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

use super::config::TrainConfig;

/// Adam over the tunable parameters of a [`ParamStore`]. Moments are keyed by
/// parameter name so they can be checkpointed next to the weights.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Global L2 norm of the gradients of all tunable parameters.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in store.tunable() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update; `clip > 0` rescales gradients to that global norm.
    /// Parameters without a gradient keep their moments and values.
    pub fn update(&mut self, store: &ParamStore, grads: &GradStore, clip: f64) -> Result<()> {
        let scale = if clip > 0.0 {
            let n = Self::grad_norm(store, grads)?;
            if n > clip {
                clip / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.tunable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale == 1.0 { g.detach() } else { (g.detach() * scale)? };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let (m, v) = (m.detach(), v.detach());
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let delta = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (delta * self.lr)?)?)?;
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    /// Moments as `optim.m.<param>` / `optim.v.<param>`.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, t) in &self.m {
            out.insert(format!("optim.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("optim.v.{k}"), t.clone());
        }
        out
    }

    pub fn restore(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        self.step = step;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("optim.m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("optim.v.") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        if self.m.len() != self.v.len() {
            return Err(Error::Validation("optimizer state has unpaired moments".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamBuilder};
    use candle_core::Device;

    fn store_with(x: f64) -> (ParamStore, Tensor) {
        let mut pb = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        let t = pb.param("w", &[1], Init::Zeros).unwrap();
        let (store, _) = pb.finish();
        store.tunable().next().unwrap().1.set(&Tensor::new(&[x], &Device::Cpu).unwrap()).unwrap();
        (store, t)
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step is lr·g/(|g| + eps) ≈ lr·sign(g).
        let (store, w) = store_with(1.0);
        let loss = (w.sqr().unwrap() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(&TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        });
        adam.update(&store, &grads, 0.0).unwrap();
        let v = w.to_vec1::<f64>().unwrap()[0];
        assert!((v - 0.9).abs() < 1e-8, "{v}");
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let (store, w) = store_with(0.37);
        let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut adam = Adam::new(&TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        });
        adam.update(&store, &grads, 0.0).unwrap();
        assert_eq!(w.to_vec1::<f64>().unwrap()[0], 0.37);
    }

    #[test]
    fn converges_on_quadratic() {
        let (store, w) = store_with(2.0);
        let mut adam = Adam::new(&TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        });
        for _ in 0..500 {
            let grads = (&w - 0.5).unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            adam.update(&store, &grads, 0.0).unwrap();
        }
        assert!((w.to_vec1::<f64>().unwrap()[0] - 0.5).abs() < 1e-2);
    }
}
