use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::archive;
use crate::decoder::Decoder;
use crate::encoders::{Encoders, TextEncoder, VisionEncoder};
use crate::error::Result;
use crate::nn::Linear;
use crate::objective::detection_logits;
use crate::params::{Group, Init, ParamBuilder, ParamStore};
use crate::spm::{ClassEmbeddings, FusionOutput, ImageHead, MaskHead, MaskLogits, PromptBank, SpmBlocks, Tvca, VcaBlock, Vsa};

use super::config::ModelConfig;

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub fusion: FusionOutput,
    /// Decoded feature map `[B, H, W, C]`.
    pub features: Tensor,
    pub masks: MaskLogits,
}

impl Forward {
    pub fn g(&self) -> &Tensor {
        &self.fusion.g
    }

    pub fn text(&self) -> &ClassEmbeddings {
        &self.fusion.text
    }
}

/// The full detector/localizer with its parameter store.
#[derive(Clone, Debug)]
pub struct MaskClip {
    pub config: ModelConfig,
    pub encoders: Encoders,
    pub spm: SpmBlocks,
    pub decoder: Decoder,
    pub store: ParamStore,
    dtype: DType,
    device: Device,
}

impl MaskClip {
    /// Fresh model. Encoder weights come from `config.pretrained` when set.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut pb = ParamBuilder::new(seed, dtype, device);
        if !config.pretrained.is_empty() {
            let tensors = archive::load_archive(Path::new(&config.pretrained), device)?;
            for prefix in ["semantic.", "text.", "spatial."] {
                pb = pb.with_source(prefix, archive::select_prefix(tensors.clone(), prefix));
            }
        }
        Self::build(config, pb)
    }

    /// Model whose every parameter is taken from `tensors`.
    pub fn from_tensors(config: &ModelConfig, tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Result<Self> {
        let pb = ParamBuilder::new(0, dtype, device).with_source("", tensors);
        Self::build(config, pb)
    }

    fn build(config: &ModelConfig, mut pb: ParamBuilder) -> Result<Self> {
        config.validate()?;
        let semantic = VisionEncoder::new(&mut pb, "semantic", &config.semantic)?;
        let text = TextEncoder::new(&mut pb, "text", &config.text)?;
        let spatial = VisionEncoder::new(&mut pb, "spatial", &config.spatial)?;

        pb.set_group(Group::Tunable);
        let ab = config.ablation;
        let (d, dm, e) = (config.semantic.width, config.spatial.width, config.text.embed_dim);
        let prompts = PromptBank::new(&mut pb, "spm.prompt", config.text.prompt_len, config.text.width, ab.prompt_tuning)?;
        let image_head = if ab.vsa {
            ImageHead::Vsa(Vsa::new(&mut pb, "spm.vsa", d, e, config.fusion_heads)?)
        } else {
            ImageHead::LastCls(Linear::new(&mut pb, "spm.cls_proj", d, e, true, Init::FanIn)?)
        };
        let plan = config.effective_plan();
        let vca = (0..plan.len())
            .map(|k| VcaBlock::new(&mut pb, &format!("spm.vca.{k}"), d, dm, config.fusion_heads))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&mut pb, "decoder", dm, &config.decoder)?;
        let c = decoder.output_channels();
        let mask_head = if ab.tvca {
            MaskHead::Tvca(Tvca::new(&mut pb, "spm.tvca", c, e)?)
        } else {
            MaskHead::Conv(Linear::new(&mut pb, "spm.mask_conv", c, 2, true, Init::FanIn)?)
        };
        let spm = SpmBlocks {
            prompts,
            image_head,
            vca,
            mask_head,
            plan,
            cls_layers: config.effective_cls_layers(),
        };
        let (dtype, device) = (pb.dtype(), pb.device().clone());
        let (store, unexpected) = pb.finish();
        if !unexpected.is_empty() {
            log::warn!("{} unused archive keys", unexpected.len());
        }
        Ok(Self {
            config: config.clone(),
            encoders: Encoders { semantic, text, spatial },
            spm,
            decoder,
            store,
            dtype,
            device,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// `crop` is `[B, 3, S_m, S_m]`, `clip_view` `[B, 3, S_c, S_c]`, both in [0, 1].
    pub fn forward(&self, crop: &Tensor, clip_view: &Tensor) -> Result<Forward> {
        let fusion = self.spm.run_fusion_plan(&self.encoders, crop, clip_view)?;
        let s = self.config.spatial.input_size;
        let features = self
            .decoder
            .decode(&fusion.spatial_tokens, fusion.spatial_grid, (s, s))?;
        let masks = self.spm.mask_head.forward(&features, &fusion.text)?;
        Ok(Forward { fusion, features, masks })
    }

    /// `[B, 2]` softmax over `(cos(g, t_real), cos(g, t_fake)) / τ`.
    pub fn class_probs(&self, fwd: &Forward, temperature: f64) -> Result<Tensor> {
        let logits = detection_logits(fwd.g(), fwd.text(), temperature)?;
        Ok(crate::nn::softmax_last(&logits)?)
    }
}
