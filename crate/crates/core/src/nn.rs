//! Differentiable building blocks composed from primitive tensor ops.
//!
//! Everything here is written in terms of ops that carry backward rules in
//! candle, so any composition can be differentiated end to end.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder};

pub const INIT_STD: f64 = 0.02;

/// Affine map over the last axis; `weight` is stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        weight_init: Init,
    ) -> Result<Self> {
        let weight = pb.param(&format!("{name}.weight"), &[out_dim, in_dim], weight_init)?;
        let bias = if bias {
            Some(pb.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let in_dim = x.dim(D::Minus1)?;
        if in_dim != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim(),
                x.dims()
            )));
        }
        // Leading axes are folded into one so the product (and its backward)
        // is a single 2-D matmul.
        let lead = &x.dims()[..x.rank() - 1];
        let rows: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.push(self.out_dim());
        let y = x
            .contiguous()?
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .reshape(out_shape)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            beta: pb.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax over the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Scales rows of the last axis to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, hidden, true, Init::FanIn)?,
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, dim, true, Init::FanIn)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(x)?.gelu()?;
        self.fc2.forward(&h)
    }
}

/// Multi-head scaled dot-product attention with query/key/value/output
/// projections.
///
/// Per head `h`: `softmax(Q_h K_hᵀ / √d) V_h` with the softmax over keys and
/// `d = width / heads`; heads are concatenated and passed through `out`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl AttentionParams {
    /// `query_dim`/`kv_dim` are the input widths; `width` the model width.
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        width: usize,
        heads: usize,
        zero_out: bool,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {width} not divisible by {heads} heads"
            )));
        }
        let w = Init::FanIn;
        let out_init = if zero_out { Init::Zeros } else { w };
        Ok(Self {
            q: Linear::new(pb, &format!("{name}.q"), query_dim, width, true, w)?,
            k: Linear::new(pb, &format!("{name}.k"), kv_dim, width, true, w)?,
            v: Linear::new(pb, &format!("{name}.v"), kv_dim, width, true, w)?,
            out: Linear::new(pb, &format!("{name}.out"), width, width, true, out_init)?,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.q.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    /// Attention weights `[B, heads, n_q, n_k]` before value mixing.
    pub fn weights(&self, q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let qh = self.split_heads(&self.q.forward(q)?)?;
        let kh = self.split_heads(&self.k.forward(k)?)?;
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut scores = (qh.matmul(&kh.t()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        softmax_last(&scores)
    }

    /// Inputs are `[B, n, dim]`; returns `[B, n_q, width]`.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        check_rank3(q, "query")?;
        check_rank3(k, "key")?;
        check_rank3(v, "value")?;
        let (b, n_q, _) = q.dims3()?;
        let (bk, n_k, _) = k.dims3()?;
        let (bv, n_v, _) = v.dims3()?;
        if n_k == 0 || n_k != n_v || b != bk || b != bv {
            return Err(Error::Shape(format!(
                "attention inputs q {:?}, k {:?}, v {:?}",
                q.dims(),
                k.dims(),
                v.dims()
            )));
        }
        let w = self.weights(q, k, mask)?;
        let vh = self.split_heads(&self.v.forward(v)?)?;
        let mixed = w.matmul(&vh)?;
        let merged = mixed.transpose(1, 2)?.reshape((b, n_q, self.width()))?;
        self.out.forward(&merged)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, self.head_dim()))?
            .transpose(1, 2)?
            .contiguous()?)
    }
}

fn check_rank3(x: &Tensor, what: &str) -> Result<()> {
    if x.rank() != 3 {
        return Err(Error::Shape(format!("{what} must be [B, n, dim], got {:?}", x.dims())));
    }
    Ok(())
}

/// Additive causal mask `[n, n]`: 0 on and below the diagonal, a large negative above.
pub fn causal_mask(n: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (n, n), device)?.to_dtype(dtype)?)
}

/// Pre-norm transformer layer: `x + attn(ln(x))` then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: AttentionParams,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), width)?,
            attn: AttentionParams::new(pb, &format!("{name}.attn"), width, width, width, heads, false)?,
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), width)?,
            mlp: Mlp::new(pb, &format!("{name}.mlp"), width, width * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h, mask)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}
