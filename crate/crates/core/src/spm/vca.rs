use candle_core::Tensor;

use crate::encoders::LayerFeatures;
use crate::error::{Error, Result};
use crate::nn::{AttentionParams, Linear};
use crate::params::{Init, ParamBuilder};
use crate::resize::resize_tokens;

/// Semantic-to-spatial cross-attention with a residual update.
///
/// Semantic patches are bilinearly resized onto the spatial grid, projected
/// `D -> D_m` by a 1x1 convolution and used as queries against the spatial
/// tokens (keys and values). The attended result `G` is added back:
/// `V_m <- V_m + G`.
#[derive(Clone, Debug)]
pub struct VcaBlock {
    /// 1x1 convolution over the resized semantic grid.
    pub proj: Linear,
    pub attn: AttentionParams,
}

impl VcaBlock {
    /// The attention output projection starts at zero, so a fresh block is the
    /// identity on the spatial stream.
    pub fn new(pb: &mut ParamBuilder, prefix: &str, semantic_width: usize, spatial_width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(pb, &format!("{prefix}.proj"), semantic_width, spatial_width, true, Init::FanIn)?,
            attn: AttentionParams::new(
                pb,
                &format!("{prefix}.attn"),
                spatial_width,
                spatial_width,
                spatial_width,
                heads,
                true,
            )?,
        })
    }

    /// Semantic queries after resize and projection, `[B, N_m, D_m]`.
    pub fn aligned_queries(&self, semantic: &LayerFeatures, spatial_grid: (usize, usize)) -> Result<Tensor> {
        let resized = resize_tokens(&semantic.patches, semantic.grid, spatial_grid)?;
        self.proj.forward(&resized)
    }

    /// The cross-attention update `G` alone.
    pub fn update(&self, semantic: &LayerFeatures, spatial: &Tensor, spatial_grid: (usize, usize)) -> Result<Tensor> {
        let (_, n_m, _) = spatial.dims3()?;
        if n_m != spatial_grid.0 * spatial_grid.1 {
            return Err(Error::Shape(format!(
                "spatial tokens {n_m} do not match grid {}x{}",
                spatial_grid.0, spatial_grid.1
            )));
        }
        let q = self.aligned_queries(semantic, spatial_grid)?;
        self.attn.forward(&q, spatial, spatial, None)
    }

    pub fn fuse(&self, semantic: &LayerFeatures, spatial: &Tensor, spatial_grid: (usize, usize)) -> Result<Tensor> {
        Ok((spatial + self.update(semantic, spatial, spatial_grid)?)?)
    }
}

pub fn vca_fuse(
    semantic: &LayerFeatures,
    spatial: &Tensor,
    spatial_grid: (usize, usize),
    block: &VcaBlock,
) -> Result<Tensor> {
    block.fuse(semantic, spatial, spatial_grid)
}
