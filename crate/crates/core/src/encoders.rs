//! The three pretrained components: a frozen semantic vision encoder (CLIP
//! style, with a `[CLS]` token), a frozen text encoder that turns prompt
//! vectors into class embeddings, and a tunable spatial encoder (MAE style,
//! patch tokens only) that can be run one layer at a time.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, l2_normalize, LayerNorm, Linear, TransformerBlock, INIT_STD};
use crate::params::{Group, Init, ParamBuilder, ParamStore};

const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    SemanticVision,
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub depth: usize,
    /// Token width (`D` for the semantic encoder, `D_m` for the spatial one).
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub input_size: usize,
    pub frozen: bool,
}

impl EncoderSpec {
    /// OpenAI CLIP ViT-L/14 vision tower.
    pub fn clip_vit_l14() -> Self {
        Self {
            kind: EncoderKind::SemanticVision,
            depth: 24,
            width: 1024,
            heads: 16,
            mlp_ratio: 4,
            patch_size: 14,
            input_size: 224,
            frozen: true,
        }
    }

    /// CLIP ViT-B/32 vision tower.
    pub fn clip_vit_b32() -> Self {
        Self {
            kind: EncoderKind::SemanticVision,
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            patch_size: 32,
            input_size: 224,
            frozen: true,
        }
    }

    /// MAE ViT-B/32 encoder at the 512 training crop.
    pub fn mae_vit_b32() -> Self {
        Self {
            kind: EncoderKind::Spatial,
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            patch_size: 32,
            input_size: 512,
            frozen: false,
        }
    }

    pub fn has_cls(&self) -> bool {
        self.kind == EncoderKind::SemanticVision
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.input_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        if self.patch_size == 0 || self.input_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    fn pixel_stats(&self) -> ([f64; 3], [f64; 3]) {
        match self.kind {
            EncoderKind::SemanticVision => (CLIP_MEAN, CLIP_STD),
            EncoderKind::Spatial => (IMAGENET_MEAN, IMAGENET_STD),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderSpec {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of learnable prompt vectors per class (`M`).
    pub prompt_len: usize,
    /// Dimension of the joint image/text embedding space.
    pub embed_dim: usize,
}

impl TextEncoderSpec {
    /// CLIP ViT-L/14 text tower.
    pub fn clip_l14() -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            prompt_len: 10,
            embed_dim: 768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.prompt_len == 0 || self.embed_dim == 0 {
            return Err(Error::Config("text encoder depth, prompt_len and embed_dim must be >= 1".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Output of one encoder layer.
#[derive(Clone, Debug)]
pub struct LayerFeatures {
    /// `[B, D]`, present only for encoders with a `[CLS]` token.
    pub cls: Option<Tensor>,
    /// `[B, grid_h * grid_w, D]`, row-major over the grid.
    pub patches: Tensor,
    pub grid: (usize, usize),
    /// Zero-based layer index.
    pub layer_index: usize,
}

/// Pre-norm ViT with learnable positional embeddings.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    spec: EncoderSpec,
    patch_embed: Linear,
    cls: Option<Tensor>,
    pos: Tensor,
    ln_pre: Option<LayerNorm>,
    blocks: Vec<TransformerBlock>,
}

impl VisionEncoder {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let prev = pb.group();
        pb.set_group(if spec.frozen { Group::Frozen } else { Group::Tunable });
        let p = spec.patch_size;
        let d = spec.width;
        let patch_embed = Linear::new(
            pb,
            &format!("{prefix}.patch_embed"),
            3 * p * p,
            d,
            true,
            Init::FanIn,
        )?;
        let n_tokens = spec.num_patches() + usize::from(spec.has_cls());
        let cls = if spec.has_cls() {
            Some(pb.param(&format!("{prefix}.cls"), &[d], Init::Normal(INIT_STD))?)
        } else {
            None
        };
        let pos = pb.param(&format!("{prefix}.pos"), &[n_tokens, d], Init::Normal(INIT_STD))?;
        let ln_pre = if spec.has_cls() {
            Some(LayerNorm::new(pb, &format!("{prefix}.ln_pre"), d)?)
        } else {
            None
        };
        let blocks = (0..spec.depth)
            .map(|l| TransformerBlock::new(pb, &format!("{prefix}.blocks.{l}"), d, spec.heads, spec.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        pb.set_group(prev);
        Ok(Self {
            spec: spec.clone(),
            patch_embed,
            cls,
            pos,
            ln_pre,
            blocks,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Pixel normalization, patchification, `[CLS]` prepend and positions.
    /// `images` is `[B, 3, S, S]` with values in `[0, 1]`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let s = self.spec.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "encoder expects [B, 3, {s}, {s}], got {:?}",
                images.dims()
            )));
        }
        let (mean, std) = self.spec.pixel_stats();
        let dev = images.device();
        let mean = Tensor::new(&mean, dev)?.to_dtype(images.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&std, dev)?.to_dtype(images.dtype())?.reshape((1, 3, 1, 1))?;
        let x = images.broadcast_sub(&mean)?.broadcast_div(&std)?;

        let p = self.spec.patch_size;
        let (gh, gw) = self.spec.grid();
        let patches = x
            .reshape(vec![b, 3, gh, p, gw, p])?
            .permute([0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((b, gh * gw, 3 * p * p))?;
        let mut tokens = self.patch_embed.forward(&patches)?;
        if let Some(cls) = &self.cls {
            let cls = cls.reshape((1, 1, self.spec.width))?.broadcast_as((b, 1, self.spec.width))?;
            tokens = Tensor::cat(&[&cls, &tokens], 1)?;
        }
        let mut tokens = tokens.broadcast_add(&self.pos)?;
        if let Some(ln) = &self.ln_pre {
            tokens = ln.forward(&tokens)?;
        }
        Ok(tokens)
    }

    /// Runs exactly one transformer layer.
    pub fn step(&self, tokens: &Tensor, layer_index: usize) -> Result<Tensor> {
        let block = self.blocks.get(layer_index).ok_or_else(|| {
            Error::Config(format!(
                "layer index {layer_index} out of range for depth {}",
                self.spec.depth
            ))
        })?;
        block.forward(tokens, None)
    }

    /// Full forward pass returning the final token sequence.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.embed(images)?;
        for l in 0..self.spec.depth {
            x = self.step(&x, l)?;
        }
        Ok(x)
    }

    /// Splits a token sequence into `[CLS]` and patch parts.
    pub fn features(&self, tokens: &Tensor, layer_index: usize) -> Result<LayerFeatures> {
        let n = tokens.dim(1)?;
        let (cls, patches) = if self.spec.has_cls() {
            (
                Some(tokens.narrow(1, 0, 1)?.squeeze(1)?),
                tokens.narrow(1, 1, n - 1)?,
            )
        } else {
            (None, tokens.clone())
        };
        Ok(LayerFeatures {
            cls,
            patches,
            grid: self.spec.grid(),
            layer_index,
        })
    }

    /// One [`LayerFeatures`] per layer.
    pub fn forward_layers(&self, images: &Tensor) -> Result<Vec<LayerFeatures>> {
        let mut x = self.embed(images)?;
        let mut out = Vec::with_capacity(self.spec.depth);
        for l in 0..self.spec.depth {
            x = self.step(&x, l)?;
            out.push(self.features(&x, l)?);
        }
        Ok(out)
    }
}

/// Causal transformer over prompt vectors; the last position is projected into
/// the joint space and L2-normalized.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    spec: TextEncoderSpec,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    ln_final: LayerNorm,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, spec: &TextEncoderSpec) -> Result<Self> {
        spec.validate()?;
        let prev = pb.group();
        pb.set_group(Group::Frozen);
        let pos = pb.param(
            &format!("{prefix}.pos"),
            &[spec.prompt_len, spec.width],
            Init::Normal(0.01),
        )?;
        let blocks = (0..spec.depth)
            .map(|l| TransformerBlock::new(pb, &format!("{prefix}.blocks.{l}"), spec.width, spec.heads, spec.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(pb, &format!("{prefix}.ln_final"), spec.width)?;
        let proj = Linear::new(
            pb,
            &format!("{prefix}.proj"),
            spec.width,
            spec.embed_dim,
            false,
            Init::Normal((spec.width as f64).powf(-0.5)),
        )?;
        pb.set_group(prev);
        Ok(Self {
            spec: spec.clone(),
            pos,
            blocks,
            ln_final,
            proj,
        })
    }

    pub fn spec(&self) -> &TextEncoderSpec {
        &self.spec
    }

    /// `prompts` is `[K, M, width]`; returns unit-norm `[K, embed_dim]`.
    pub fn encode(&self, prompts: &Tensor) -> Result<Tensor> {
        let (_, m, w) = prompts.dims3()?;
        if m != self.spec.prompt_len || w != self.spec.width {
            return Err(Error::Shape(format!(
                "prompts must be [K, {}, {}], got {:?}",
                self.spec.prompt_len,
                self.spec.width,
                prompts.dims()
            )));
        }
        let mask = causal_mask(m, prompts.dtype(), prompts.device())?;
        let mut x = prompts.broadcast_add(&self.pos)?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        let last = self.ln_final.forward(&x.narrow(1, m - 1, 1)?.squeeze(1)?)?;
        l2_normalize(&self.proj.forward(&last)?)
    }
}

/// The three pretrained components used together by the model.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub semantic: VisionEncoder,
    pub text: TextEncoder,
    pub spatial: VisionEncoder,
}

/// Result of loading an encoder from an archive.
#[derive(Debug)]
pub struct LoadReport {
    pub store: ParamStore,
    /// Archive keys under the encoder prefix that the encoder did not consume.
    pub unexpected: Vec<String>,
}

/// Builds a vision encoder whose every parameter comes from `archive`.
///
/// Keys are `<prefix>.<...>`; a missing key or a shape conflict is an error
/// naming the key, unused keys under the prefix are reported and logged.
pub fn load_pretrained(
    archive_path: &Path,
    prefix: &str,
    spec: &EncoderSpec,
    dtype: DType,
    device: &Device,
) -> Result<(VisionEncoder, LoadReport)> {
    let tensors = archive::select_prefix(
        archive::load_archive(archive_path, device)?,
        &format!("{prefix}."),
    );
    let mut pb = ParamBuilder::new(0, dtype, device).with_source(&format!("{prefix}."), tensors);
    let encoder = VisionEncoder::new(&mut pb, prefix, spec)?;
    let (store, unexpected) = pb.finish();
    Ok((encoder, LoadReport { store, unexpected }))
}

/// Text-encoder counterpart of [`load_pretrained`].
pub fn load_pretrained_text(
    archive_path: &Path,
    prefix: &str,
    spec: &TextEncoderSpec,
    dtype: DType,
    device: &Device,
) -> Result<(TextEncoder, LoadReport)> {
    let tensors = archive::select_prefix(
        archive::load_archive(archive_path, device)?,
        &format!("{prefix}."),
    );
    let mut pb = ParamBuilder::new(0, dtype, device).with_source(&format!("{prefix}."), tensors);
    let encoder = TextEncoder::new(&mut pb, prefix, spec)?;
    let (store, unexpected) = pb.finish();
    Ok((encoder, LoadReport { store, unexpected }))
}

/// Stacks the `[CLS]` tokens of `features` into `[B, L, D]`.
pub fn cls_stack(features: &[LayerFeatures]) -> Result<Tensor> {
    let cls: Vec<Tensor> = features
        .iter()
        .map(|f| {
            f.cls
                .clone()
                .ok_or_else(|| Error::Shape(format!("layer {} has no [CLS] token", f.layer_index)))
        })
        .collect::<Result<_>>()?;
    if cls.is_empty() {
        return Err(Error::Shape("no layers to stack".into()));
    }
    Ok(Tensor::stack(&cls, 1)?)
}
