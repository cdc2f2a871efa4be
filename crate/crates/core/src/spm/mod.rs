//! Tunable blocks coupling the pretrained encoders: learnable prompts, the
//! `[CLS]` aggregation head (VSA), semantic-to-spatial fusion (VCA) and the
//! text-guided mask head (TVCA).

pub mod attention;
pub mod plan;
pub mod prompts;
pub mod tvca;
pub mod vca;
pub mod vsa;

use candle_core::Tensor;

pub use attention::{attention, AttentionParams};
pub use plan::FusionPlan;
pub use prompts::{ClassEmbeddings, PromptBank};
pub use tvca::{tvca_localize, MaskHead, MaskLogits, Tvca};
pub use vca::{vca_fuse, VcaBlock};
pub use vsa::{vsa_aggregate, ImageHead, Vsa};

use crate::encoders::Encoders;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SpmBlocks {
    pub prompts: PromptBank,
    pub image_head: ImageHead,
    pub vca: Vec<VcaBlock>,
    pub mask_head: MaskHead,
    pub plan: FusionPlan,
    /// 1-based semantic layers whose `[CLS]` tokens feed the image head.
    pub cls_layers: Vec<usize>,
}

/// Everything the decoder and losses need from one fused forward pass.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Unit-norm image representation `[B, E]`.
    pub g: Tensor,
    /// Final spatial tokens `[B, N_m, D_m]`.
    pub spatial_tokens: Tensor,
    pub spatial_grid: (usize, usize),
    pub text: ClassEmbeddings,
    /// Number of VCA invocations performed.
    pub vca_calls: usize,
}

impl SpmBlocks {
    /// Runs the semantic encoder once, steps the spatial encoder layer by layer
    /// firing VCA at each plan pair, and aggregates the selected `[CLS]` tokens.
    ///
    /// `crop` is `[B, 3, S_m, S_m]`, `clip_view` is `[B, 3, S_c, S_c]`.
    pub fn run_fusion_plan(&self, enc: &Encoders, crop: &Tensor, clip_view: &Tensor) -> Result<FusionOutput> {
        if self.vca.len() != self.plan.len() {
            return Err(Error::Config(format!(
                "{} VCA blocks for a plan of {} pairs",
                self.vca.len(),
                self.plan.len()
            )));
        }
        let semantic = enc.semantic.forward_layers(clip_view)?;
        let cls: Vec<Tensor> = self
            .cls_layers
            .iter()
            .map(|&l| {
                semantic
                    .get(l.wrapping_sub(1))
                    .and_then(|f| f.cls.clone())
                    .ok_or_else(|| Error::Config(format!("no [CLS] token for semantic layer {l}")))
            })
            .collect::<Result<_>>()?;
        if cls.is_empty() {
            return Err(Error::Config("image head needs at least one [CLS] layer".into()));
        }
        let g = self.image_head.forward(&Tensor::stack(&cls, 1)?)?;
        let text = self.prompts.class_embeddings(&enc.text)?;

        let grid = enc.spatial.spec().grid();
        let mut tokens = enc.spatial.embed(crop)?;
        let mut vca_calls = 0;
        for l in 0..enc.spatial.spec().depth {
            tokens = enc.spatial.step(&tokens, l)?;
            if let Some((k, s)) = self.plan.firing_after(l + 1) {
                let feats = semantic
                    .get(s - 1)
                    .ok_or_else(|| Error::Config(format!("semantic layer {s} out of range")))?;
                tokens = self.vca[k].fuse(feats, &tokens, grid)?;
                vca_calls += 1;
            }
        }
        Ok(FusionOutput {
            g,
            spatial_tokens: tokens,
            spatial_grid: grid,
            text,
            vca_calls,
        })
    }
}
