use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, images_to_tensor, masks_to_tensor, sample_rng, ImageSample, Label, Manifest, Split};
use crate::error::{Error, Result};
use crate::objective::{combined_loss, edge_weight_map, LossBreakdown, Targets};

use super::config::Setup;
use super::state::ModelState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Per-term means over the epoch's steps.
    pub mean: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Owns the model state and the decoded training samples.
pub struct Trainer {
    pub state: ModelState,
    samples: Vec<ImageSample>,
}

impl Trainer {
    /// Loads the train split of `manifest`; both classes must be present.
    pub fn new(state: ModelState, manifest: &Manifest) -> Result<Self> {
        let train = manifest.split(Split::Train);
        for label in [Label::Real, Label::Fake] {
            if train.count(label) == 0 {
                return Err(Error::Validation(format!("no {label:?} samples in the train split")));
            }
        }
        let samples = (0..train.len()).map(|i| train.load_sample(i)).collect::<Result<Vec<_>>>()?;
        Ok(Self { state, samples })
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    fn batch(&self, indices: &[usize], epoch: usize) -> Result<(Tensor, Tensor, Targets)> {
        let setup = &self.state.setup;
        let (dtype, device) = (self.state.model.dtype(), self.state.model.device().clone());
        let views = indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                augment(s, &setup.augmentation, &mut sample_rng(setup.seed, epoch as u64, &s.id))
            })
            .collect::<Result<Vec<_>>>()?;
        let crops: Vec<_> = views.iter().map(|v| &v.sample.image).collect();
        let clips: Vec<_> = views.iter().map(|v| &v.clip_view).collect();
        let masks: Vec<_> = views.iter().map(|v| &v.sample.mask).collect();
        let (w, h) = views[0].sample.mask.dimensions();
        let weights: Vec<f64> = views
            .iter()
            .flat_map(|v| edge_weight_map(&v.sample.mask, setup.loss.edge_radius, setup.loss.edge_gain))
            .collect();
        let labels: Vec<f64> = views
            .iter()
            .flat_map(|v| if v.sample.label.is_fake() { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        let targets = Targets {
            masks: masks_to_tensor(&masks, dtype, &device)?,
            edge_weights: Tensor::from_vec(weights, (views.len(), h as usize, w as usize), &device)?.to_dtype(dtype)?,
            labels: Tensor::from_vec(labels, (views.len(), 2), &device)?.to_dtype(dtype)?,
        };
        Ok((
            images_to_tensor(&crops, dtype, &device)?,
            images_to_tensor(&clips, dtype, &device)?,
            targets,
        ))
    }

    /// Forward, loss, backward and one optimizer update on `indices`.
    pub fn train_step(&mut self, indices: &[usize], epoch: usize) -> Result<LossBreakdown> {
        let step = self.state.step() as usize + 1;
        let (crop, clip, targets) = self.batch(indices, epoch)?;
        let fwd = self.state.model.forward(&crop, &clip)?;
        let terms = combined_loss(&fwd.masks.fake, fwd.g(), fwd.text(), &targets, &self.state.setup.loss)
            .map_err(|e| match e {
                Error::Numeric { what, .. } => Error::Numeric { what, step },
                other => other,
            })?;
        let loss = terms.breakdown()?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric {
                what: "loss".into(),
                step,
            });
        }
        let grads = terms.total.backward()?;
        let clip_norm = self.state.setup.train.grad_clip;
        self.state.optimizer.update(&self.state.model.store, &grads, clip_norm)?;
        Ok(loss)
    }

    /// Sample order for `epoch`, a permutation derived from the run seed.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut sample_rng(self.state.setup.seed, epoch as u64, "__order__"));
        order
    }

    /// Runs the configured epochs (or until `max_steps`), checkpointing under
    /// `out_dir/checkpoints` when given.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainLog> {
        let cfg = self.state.setup.train.clone();
        let mut log = TrainLog::default();
        let start = self.state.epoch + 1;
        for epoch in start..start + cfg.epochs {
            let order = self.epoch_order(epoch);
            let mut sum = LossBreakdown::default();
            let mut steps = 0;
            for chunk in order.chunks(cfg.batch_size) {
                if cfg.max_steps > 0 && self.state.step() as usize >= cfg.max_steps {
                    break;
                }
                let loss = self.train_step(chunk, epoch)?;
                log::debug!("epoch {epoch} step {} loss {:.6}", self.state.step(), loss.total);
                sum.total += loss.total;
                sum.ce += loss.ce;
                sum.bce += loss.bce;
                sum.edg += loss.edg;
                steps += 1;
                log.steps.push(StepLog {
                    step: self.state.step(),
                    epoch,
                    loss,
                });
            }
            if steps == 0 {
                break;
            }
            self.state.epoch = epoch;
            let n = steps as f64;
            let mean = LossBreakdown {
                total: sum.total / n,
                ce: sum.ce / n,
                bce: sum.bce / n,
                edg: sum.edg / n,
            };
            log::info!("epoch {epoch}: loss {:.6} (ce {:.4}, bce {:.4}, edg {:.4})", mean.total, mean.ce, mean.bce, mean.edg);
            log.epochs.push(EpochLog { epoch, steps, mean });
            if let (Some(dir), true) = (out_dir, cfg.checkpoint_every > 0) {
                if (epoch + 1 - start) % cfg.checkpoint_every == 0 {
                    self.state.save(&dir.join("checkpoints").join(format!("epoch_{epoch:04}")))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.state.save(&dir.join("checkpoints").join("last"))?;
        }
        Ok(log)
    }
}

/// Fresh model from `setup`, trained on the train split of `manifest`.
pub fn train(manifest: &Manifest, setup: &Setup, dtype: DType, device: &Device, out_dir: Option<&Path>) -> Result<(ModelState, TrainLog)> {
    let state = ModelState::init(setup, dtype, device)?;
    let mut trainer = Trainer::new(state, manifest)?;
    let log = trainer.run(out_dir)?;
    Ok((trainer.state, log))
}
