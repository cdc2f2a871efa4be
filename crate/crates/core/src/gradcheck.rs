//! Central finite-difference check of autodiff gradients.

use candle_core::{DType, Device, Tensor, Var};
use image::GrayImage;

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoders::LayerFeatures;
use crate::error::{Error, Result};
use crate::nn::AttentionParams;
use crate::objective::{combined_loss, edge_weight_map, LossConfig, Targets};
use crate::params::{Init, ParamBuilder};
use crate::spm::{attention, tvca_localize, vca_fuse, vsa_aggregate, ClassEmbeddings, Tvca, VcaBlock, Vsa};

/// Relative error of one input's gradient:
/// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`, or the
/// absolute difference norm when both are below `1e-12`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scalar(t: &Tensor) -> Result<f64> {
    if t.elem_count() != 1 {
        return Err(Error::Shape(format!("objective must be scalar, got {:?}", t.dims())));
    }
    Ok(t.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Compares the backward pass of the scalar function `f` at `inputs` with
/// central differences of step `h`. Inputs must be `f64`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if inputs.iter().any(|t| t.dtype() != DType::F64) {
        return Err(Error::Validation("gradient checks run in f64".into()));
    }
    let vars = inputs.iter().map(Var::from_tensor).collect::<candle_core::Result<Vec<_>>>()?;
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors)?.backward()?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let analytic = match grads.get(vars[i].as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; x.elem_count()],
        };
        let base = x.flatten_all()?.to_vec1::<f64>()?;
        let mut numeric = Vec::with_capacity(base.len());
        let mut current: Vec<Tensor> = inputs.to_vec();
        for j in 0..base.len() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                current[i] = Tensor::from_vec(v, x.dims(), x.device())?;
                scalar(&f(&current)?)
            };
            let (plus, minus) = (eval(h)?, eval(-h)?);
            numeric.push((plus - minus) / (2.0 * h));
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        rel_errors.push(if scale < 1e-12 { norm(&diff) } else { norm(&diff) / scale });
    }
    Ok(GradCheck { rel_errors })
}

/// Finite-difference step used by [`suite`].
pub const SUITE_STEP: f64 = 1e-5;

/// Seeded f64 tensors for the suite; names only keep the builder's keys unique.
struct Draw(ParamBuilder);

impl Draw {
    fn new(seed: u64) -> Self {
        Self(ParamBuilder::new(seed, DType::F64, &Device::Cpu))
    }

    fn t(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.0.param(name, shape, Init::Normal(0.5))
    }
}

/// Contracts `y` with a fixed random tensor to get a scalar objective that
/// exercises every output element.
fn probe(y: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok((y * r.reshape(y.dims())?)?.sum_all()?)
}

fn attention_params(pb: &mut ParamBuilder, prefix: &str, width: usize, heads: usize) -> Result<AttentionParams> {
    AttentionParams::new(pb, prefix, width, width, width, heads, false)
}

/// Gradient checks for each differentiable block on small inputs (grids of at
/// most 8x8). Every check covers the block inputs and at least one weight.
pub fn suite() -> Result<Vec<(&'static str, GradCheck)>> {
    let mut d = Draw::new(2024);
    let mut out = Vec::new();

    // attention
    {
        let params = attention_params(&mut d.0, "attn", 8, 2)?;
        let (q, k, v) = (d.t("q", &[2, 3, 8])?, d.t("k", &[2, 5, 8])?, d.t("v", &[2, 5, 8])?);
        let r = d.t("attn.r", &[2 * 3 * 8])?;
        let inputs = [q, k, v, params.q.weight.clone(), params.k.weight.clone(), params.out.weight.clone()];
        let res = check_gradients(&inputs, SUITE_STEP, |t| {
            let mut p = params.clone();
            p.q.weight = t[3].clone();
            p.k.weight = t[4].clone();
            p.out.weight = t[5].clone();
            probe(&attention(&t[0], &t[1], &t[2], &p)?, &r)
        })?;
        out.push(("attention", res));
    }

    // vsa_aggregate
    {
        let vsa = Vsa::new(&mut d.0, "vsa", 8, 6, 2)?;
        let cls: Vec<Tensor> = (0..3).map(|i| d.t(&format!("cls{i}"), &[2, 8])).collect::<Result<_>>()?;
        let r = d.t("vsa.r", &[2 * 6])?;
        let mut inputs = cls.clone();
        inputs.extend([vsa.proj.weight.clone(), vsa.attn.v.weight.clone()]);
        let res = check_gradients(&inputs, SUITE_STEP, |t| {
            let mut v = vsa.clone();
            v.proj.weight = t[3].clone();
            v.attn.v.weight = t[4].clone();
            probe(&vsa_aggregate(&t[..3], &v)?, &r)
        })?;
        out.push(("vsa_aggregate", res));
    }

    // vca_fuse: a non-zero output projection so the attention path is live.
    {
        let mut block = VcaBlock::new(&mut d.0, "vca", 6, 8, 2)?;
        block.attn.out.weight = d.t("vca.out", &[8, 8])?;
        let sem = d.t("sem", &[1, 4, 6])?;
        let spatial = d.t("spa", &[1, 16, 8])?;
        let r = d.t("vca.r", &[16 * 8])?;
        let inputs = [sem, spatial, block.proj.weight.clone(), block.attn.out.weight.clone()];
        let res = check_gradients(&inputs, SUITE_STEP, |t| {
            let mut b = block.clone();
            b.proj.weight = t[2].clone();
            b.attn.out.weight = t[3].clone();
            let feats = LayerFeatures {
                cls: None,
                patches: t[0].clone(),
                grid: (2, 2),
                layer_index: 0,
            };
            probe(&vca_fuse(&feats, &t[1], (4, 4), &b)?, &r)
        })?;
        out.push(("vca_fuse", res));
    }

    // tvca_localize
    {
        let mut tvca = Tvca::new(&mut d.0, "tvca", 5, 4)?;
        tvca.refine_weight = d.t("tvca.rw", &[2, 2])?;
        let feats = d.t("feat", &[2, 4, 4, 5])?;
        let (tr, tf) = (d.t("t_real", &[4])?, d.t("t_fake", &[4])?);
        let (r1, r2) = (d.t("tvca.r1", &[32])?, d.t("tvca.r2", &[32])?);
        let inputs = [feats, tr, tf, tvca.key_proj.weight.clone(), tvca.refine_weight.clone()];
        let res = check_gradients(&inputs, SUITE_STEP, |t| {
            let mut h = tvca.clone();
            h.key_proj.weight = t[3].clone();
            h.refine_weight = t[4].clone();
            let text = ClassEmbeddings {
                real: t[1].clone(),
                fake: t[2].clone(),
            };
            let m = tvca_localize(&t[0], &text, &h)?;
            Ok((probe(&m.fake, &r1)? + probe(&m.real, &r2)?)?)
        })?;
        out.push(("tvca_localize", res));
    }

    // decode
    {
        let cfg = DecoderConfig {
            scales: vec![0.5, 2.0],
            channels: 2,
        };
        let dec = Decoder::new(&mut d.0, "dec", 3, &cfg)?;
        let tokens = d.t("tokens", &[1, 16, 3])?;
        let r = d.t("dec.r", &[8 * 8 * 4])?;
        let inputs = [tokens, dec.branches[0].weight.clone(), dec.branches[1].weight.clone(), dec.branches[1].bias.clone()];
        let res = check_gradients(&inputs, SUITE_STEP, |t| {
            let mut dd = dec.clone();
            dd.branches[0].weight = t[1].clone();
            dd.branches[1].weight = t[2].clone();
            dd.branches[1].bias = t[3].clone();
            probe(&dd.decode(&t[0], (4, 4), (8, 8))?, &r)
        })?;
        out.push(("decode", res));
    }

    // combined_loss
    {
        let cfg = LossConfig {
            edge_radius: 1,
            ..LossConfig::default()
        };
        let masks: Vec<GrayImage> = (0..2)
            .map(|i| GrayImage::from_fn(8, 8, |x, y| image::Luma([u8::from(x + i > 3 && y < 5)])))
            .collect();
        let dev = Device::Cpu;
        let flat = |f: &dyn Fn(&GrayImage) -> Vec<f64>| -> Vec<f64> { masks.iter().flat_map(f).collect() };
        let targets = Targets {
            masks: Tensor::from_vec(flat(&|m| m.as_raw().iter().map(|&v| f64::from(v)).collect()), (2, 8, 8), &dev)?,
            edge_weights: Tensor::from_vec(flat(&|m| edge_weight_map(m, cfg.edge_radius, cfg.edge_gain)), (2, 8, 8), &dev)?,
            labels: Tensor::new(&[[0.0f64, 1.0], [1.0, 0.0]], &dev)?,
        };
        let inputs = [d.t("logits", &[2, 8, 8])?, d.t("g", &[2, 4])?, d.t("lt_real", &[4])?, d.t("lt_fake", &[4])?];
        let res = check_gradients(&inputs, SUITE_STEP, |t| {
            let text = ClassEmbeddings {
                real: t[2].clone(),
                fake: t[3].clone(),
            };
            Ok(combined_loss(&t[0], &t[1], &text, &targets, &cfg)?.total)
        })?;
        out.push(("combined_loss", res));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn polynomial_gradient() {
        let x = Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let r = check_gradients(&[x], 1e-5, |t| Ok((t[0].powf(3.0)? + t[0].sin()?)?.sum_all()?)).unwrap();
        assert!(r.max_rel_error() < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach() hides the dependency from autodiff but not from differences.
        let x = Tensor::new(&[0.5f64, 1.5], &Device::Cpu).unwrap();
        let r = check_gradients(&[x], 1e-5, |t| Ok((t[0].detach().sqr()? + &t[0])?.sum_all()?)).unwrap();
        assert!(r.max_rel_error() > 0.1);
    }

    #[test]
    fn block_suite_passes() {
        let results = suite().unwrap();
        assert_eq!(results.len(), 6);
        for (name, r) in results {
            assert!(r.max_rel_error() < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn rejects_f32() {
        let x = Tensor::new(&[0.5f32], &Device::Cpu).unwrap();
        assert!(check_gradients(&[x], 1e-5, |t| Ok(t[0].sum_all()?)).is_err());
    }
}
