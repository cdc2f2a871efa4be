use serde::{Deserialize, Serialize};

use crate::data::AugmentationConfig;
use crate::decoder::DecoderConfig;
use crate::encoders::{EncoderKind, EncoderSpec, TextEncoderSpec};
use crate::error::{Error, Result};
use crate::objective::LossConfig;
use crate::spm::FusionPlan;

/// Component switches for ablations. With a block disabled the model falls
/// back to: fixed (frozen) prompts, the last-layer `[CLS]` token, no fusion,
/// and a linear mask head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub prompt_tuning: bool,
    pub vsa: bool,
    pub vca: bool,
    pub tvca: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            prompt_tuning: true,
            vsa: true,
            vca: true,
            tvca: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub semantic: EncoderSpec,
    pub spatial: EncoderSpec,
    pub text: TextEncoderSpec,
    /// Attention heads in VSA and VCA.
    pub fusion_heads: usize,
    /// 1-based `(semantic layer, spatial layer)` pairs.
    pub plan: FusionPlan,
    /// 1-based semantic layers whose `[CLS]` tokens feed VSA; empty = all.
    pub cls_layers: Vec<usize>,
    pub decoder: DecoderConfig,
    pub ablation: Ablation,
    /// Archive with `semantic.*`, `text.*` and `spatial.*` weights. Empty
    /// means random initialization.
    pub pretrained: String,
}

impl Default for ModelConfig {
    /// CLIP ViT-L/14 + MAE ViT-B/32 with four evenly spaced fusion points.
    fn default() -> Self {
        let semantic = EncoderSpec::clip_vit_l14();
        let spatial = EncoderSpec::mae_vit_b32();
        let plan = FusionPlan::evenly_spaced(semantic.depth, spatial.depth, 4);
        Self {
            semantic,
            spatial,
            text: TextEncoderSpec::clip_l14(),
            fusion_heads: 8,
            plan,
            cls_layers: Vec::new(),
            decoder: DecoderConfig::default(),
            ablation: Ablation::default(),
            pretrained: String::new(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale model: two-layer 64-wide encoders, 64x64 spatial input.
    pub fn toy() -> Self {
        let vision = |kind, input_size, frozen| EncoderSpec {
            kind,
            depth: 2,
            width: 64,
            heads: 8,
            mlp_ratio: 2,
            patch_size: 8,
            input_size,
            frozen,
        };
        Self {
            semantic: vision(EncoderKind::SemanticVision, 32, true),
            spatial: vision(EncoderKind::Spatial, 64, false),
            text: TextEncoderSpec {
                depth: 2,
                width: 64,
                heads: 8,
                mlp_ratio: 2,
                prompt_len: 10,
                embed_dim: 64,
            },
            fusion_heads: 8,
            plan: FusionPlan(vec![(1, 1), (2, 2)]),
            cls_layers: Vec::new(),
            decoder: DecoderConfig {
                scales: vec![0.5, 2.0, 4.0],
                channels: 16,
            },
            ablation: Ablation::default(),
            pretrained: String::new(),
        }
    }

    /// Effective `[CLS]` layers after defaults and ablations.
    pub fn effective_cls_layers(&self) -> Vec<usize> {
        if !self.ablation.vsa {
            vec![self.semantic.depth]
        } else if self.cls_layers.is_empty() {
            (1..=self.semantic.depth).collect()
        } else {
            self.cls_layers.clone()
        }
    }

    pub fn effective_plan(&self) -> FusionPlan {
        if self.ablation.vca {
            self.plan.clone()
        } else {
            FusionPlan::empty()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.semantic.validate()?;
        self.spatial.validate()?;
        self.text.validate()?;
        self.decoder.validate()?;
        if self.semantic.kind != EncoderKind::SemanticVision {
            return Err(Error::Config("model.semantic must be a semantic_vision encoder".into()));
        }
        if self.spatial.kind != EncoderKind::Spatial {
            return Err(Error::Config("model.spatial must be a spatial encoder".into()));
        }
        if !self.semantic.frozen {
            return Err(Error::Config("the semantic encoder is always frozen".into()));
        }
        if self.fusion_heads == 0
            || self.semantic.width % self.fusion_heads != 0
            || self.spatial.width % self.fusion_heads != 0
        {
            return Err(Error::Config(format!(
                "fusion_heads {} must divide widths {} and {}",
                self.fusion_heads, self.semantic.width, self.spatial.width
            )));
        }
        self.plan.validate(self.semantic.depth, self.spatial.depth)?;
        if let Some(&l) = self.cls_layers.iter().find(|&&l| l == 0 || l > self.semantic.depth) {
            return Err(Error::Config(format!(
                "cls layer {l} outside 1..={}",
                self.semantic.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop after this many optimizer steps; 0 = run all epochs.
    pub max_steps: usize,
    /// Global gradient-norm clip; 0 = off.
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs (and after the last);
    /// 0 = only after the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-4,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 0,
            grad_clip: 0.0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setup {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            augmentation: AugmentationConfig::default(),
            seed: 0,
        }
    }
}

impl Setup {
    /// Toy model trained full-batch on 16 fixtures without augmentation.
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        let augmentation = AugmentationConfig::identity(model.spatial.input_size as u32, model.semantic.input_size as u32);
        Self {
            model,
            loss: LossConfig::default(),
            train: TrainConfig {
                batch_size: 16,
                learning_rate: 3e-3,
                epochs: 300,
                checkpoint_every: 0,
                ..TrainConfig::default()
            },
            augmentation,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.augmentation
            .validate(self.model.spatial.patch_size, self.model.semantic.patch_size)?;
        if self.augmentation.crop_size as usize != self.model.spatial.input_size {
            return Err(Error::Config(format!(
                "crop_size {} must equal the spatial input size {}",
                self.augmentation.crop_size, self.model.spatial.input_size
            )));
        }
        if self.augmentation.clip_input_size as usize != self.model.semantic.input_size {
            return Err(Error::Config(format!(
                "clip_input_size {} must equal the semantic input size {}",
                self.augmentation.clip_input_size, self.model.semantic.input_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::default().validate().unwrap();
        Setup::toy().validate().unwrap();
        let mut s = Setup::default();
        s.augmentation.crop_size = 512;
        s.augmentation.clip_input_size = 224;
        s.validate().unwrap();
    }

    #[test]
    fn default_plan_is_evenly_spaced() {
        assert_eq!(ModelConfig::default().plan.0, vec![(6, 3), (12, 6), (18, 9), (24, 12)]);
    }

    #[test]
    fn ablations_change_effective_layout() {
        let mut c = ModelConfig::toy();
        assert_eq!(c.effective_cls_layers(), vec![1, 2]);
        c.ablation.vsa = false;
        c.ablation.vca = false;
        assert_eq!(c.effective_cls_layers(), vec![2]);
        assert!(c.effective_plan().is_empty());
    }

    #[test]
    fn mismatched_crop_rejected() {
        let mut s = Setup::toy();
        s.augmentation.crop_size = 128;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }
}
