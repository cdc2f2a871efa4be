use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamBuilder};
use crate::spm::prompts::ClassEmbeddings;

/// Per-pixel logit maps `[B, H, W]`.
#[derive(Clone, Debug)]
pub struct MaskLogits {
    pub real: Tensor,
    pub fake: Tensor,
}

/// Text-guided mask head.
///
/// The decoder map `F` is linearly projected to the text dimension and used
/// as keys; the two class embeddings are the queries. The pre-softmax score map
/// `t·kᵀ/√d` is kept per pixel (one channel per class) and refined by a 1x1
/// convolution into `(M_real, M_fake)`.
#[derive(Clone, Debug)]
pub struct Tvca {
    pub key_proj: Linear,
    /// 1x1 convolution `[2 out, 2 in]` plus bias `[2]`.
    pub refine_weight: Tensor,
    pub refine_bias: Tensor,
}

fn tokens_of(features: &Tensor) -> Result<(Tensor, (usize, usize, usize))> {
    let (b, h, w, c) = features.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("mask head feature map has zero spatial size".into()));
    }
    Ok((features.contiguous()?.reshape((b * h * w, c))?, (b, h, w)))
}

fn split_maps(two_channel: &Tensor, b: usize, h: usize, w: usize) -> Result<MaskLogits> {
    let maps = two_channel.reshape((b, h, w, 2))?;
    Ok(MaskLogits {
        real: maps.narrow(3, 0, 1)?.squeeze(3)?,
        fake: maps.narrow(3, 1, 1)?.squeeze(3)?,
    })
}

impl Tvca {
    /// The refinement convolution starts at zero.
    pub fn new(pb: &mut ParamBuilder, prefix: &str, feature_channels: usize, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            key_proj: Linear::new(pb, &format!("{prefix}.key_proj"), feature_channels, embed_dim, true, Init::FanIn)?,
            refine_weight: pb.param(&format!("{prefix}.refine.weight"), &[2, 2], Init::Zeros)?,
            refine_bias: pb.param(&format!("{prefix}.refine.bias"), &[2], Init::Zeros)?,
        })
    }

    /// Score maps `[B*H*W, 2]` (real, fake) before refinement.
    ///
    /// `t·(W f + b) = (tW)·f + t·b`, so the queries are pulled back into
    /// feature space instead of projecting every pixel to the text width.
    pub fn scores(&self, features: &Tensor, text: &ClassEmbeddings) -> Result<Tensor> {
        let (tokens, _) = tokens_of(features)?;
        if tokens.dim(1)? != self.key_proj.in_dim() {
            return Err(Error::Shape(format!(
                "TVCA expects {} feature channels, got {:?}",
                self.key_proj.in_dim(),
                features.dims()
            )));
        }
        let queries = text.stacked()?;
        let e = self.key_proj.out_dim() as f64;
        let pulled = queries.matmul(&self.key_proj.weight)?;
        let mut scores = tokens.matmul(&pulled.t()?)?;
        if let Some(bias) = &self.key_proj.bias {
            let offset = queries.matmul(&bias.unsqueeze(1)?)?.squeeze(1)?;
            scores = scores.broadcast_add(&offset)?;
        }
        Ok((scores / e.sqrt())?)
    }

    /// `features` is channels-last `[B, H, W, C]`.
    pub fn localize(&self, features: &Tensor, text: &ClassEmbeddings) -> Result<MaskLogits> {
        let (b, h, w, _) = features.dims4()?;
        let refined = self
            .scores(features, text)?
            .matmul(&self.refine_weight.t()?)?
            .broadcast_add(&self.refine_bias)?;
        split_maps(&refined, b, h, w)
    }
}

/// Mask head variants: text-guided, or a plain 1x1 convolution `C -> 2`.
#[derive(Clone, Debug)]
pub enum MaskHead {
    Tvca(Tvca),
    Conv(Linear),
}

impl MaskHead {
    /// `features` is channels-last `[B, H, W, C]`.
    pub fn forward(&self, features: &Tensor, text: &ClassEmbeddings) -> Result<MaskLogits> {
        match self {
            MaskHead::Tvca(t) => t.localize(features, text),
            MaskHead::Conv(conv) => {
                let (tokens, (b, h, w)) = tokens_of(features)?;
                split_maps(&conv.forward(&tokens)?, b, h, w)
            }
        }
    }
}

pub fn tvca_localize(features: &Tensor, text: &ClassEmbeddings, tvca: &Tvca) -> Result<MaskLogits> {
    tvca.localize(features, text)
}
