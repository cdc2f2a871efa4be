use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, AttentionParams, Linear};
use crate::params::{Init, ParamBuilder};

/// Self-attention over per-layer `[CLS]` tokens, mean-pooled and projected
/// into the joint embedding space.
#[derive(Clone, Debug)]
pub struct Vsa {
    pub attn: AttentionParams,
    pub proj: Linear,
}

impl Vsa {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, width: usize, embed_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: AttentionParams::new(pb, &format!("{prefix}.attn"), width, width, width, heads, false)?,
            proj: Linear::new(pb, &format!("{prefix}.proj"), width, embed_dim, true, Init::FanIn)?,
        })
    }

    /// `cls` is `[B, L, D]`; returns unit-norm `g` of shape `[B, E]`.
    pub fn aggregate(&self, cls: &Tensor) -> Result<Tensor> {
        if cls.rank() != 3 || cls.dim(1)? == 0 {
            return Err(Error::Shape(format!("VSA expects [B, L>=1, D], got {:?}", cls.dims())));
        }
        let attended = self.attn.forward(cls, cls, cls, None)?;
        let pooled = attended.mean(1)?;
        l2_normalize(&self.proj.forward(&pooled)?)
    }
}

/// Stacks per-layer `[B, D]` tokens and runs [`Vsa::aggregate`].
pub fn vsa_aggregate(cls_tokens: &[Tensor], vsa: &Vsa) -> Result<Tensor> {
    if cls_tokens.is_empty() {
        return Err(Error::Shape("VSA needs at least one [CLS] token".into()));
    }
    vsa.aggregate(&Tensor::stack(cls_tokens, 1)?)
}

/// Global image representation head.
#[derive(Clone, Debug)]
pub enum ImageHead {
    Vsa(Vsa),
    /// Ablation: linear projection of the last layer's `[CLS]` token only.
    LastCls(Linear),
}

impl ImageHead {
    /// `cls` is `[B, L, D]` over the selected layers (last one last).
    pub fn forward(&self, cls: &Tensor) -> Result<Tensor> {
        match self {
            ImageHead::Vsa(v) => v.aggregate(cls),
            ImageHead::LastCls(proj) => {
                let l = cls.dim(1)?;
                if l == 0 {
                    return Err(Error::Shape("no [CLS] tokens".into()));
                }
                let last = cls.narrow(1, l - 1, 1)?.squeeze(1)?;
                l2_normalize(&proj.forward(&last)?)
            }
        }
    }
}
