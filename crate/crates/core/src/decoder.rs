//! Multi-scale convolutional decoder from final spatial tokens to the dense
//! feature map consumed by the mask head.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder};
use crate::resize::resize_nhwc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub scales: Vec<f64>,
    /// Output channels of each scale branch.
    pub channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.5, 2.0, 4.0],
            channels: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("decoder needs at least one scale".into()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("decoder scales must be positive: {:?}", self.scales)));
        }
        if self.channels == 0 {
            return Err(Error::Config("decoder channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Key fragment for a scale: `0.5 -> "0p5"`, `2 -> "2"`.
pub fn scale_key(scale: f64) -> String {
    let s = format!("{scale}");
    s.replace('.', "p")
}

#[derive(Clone, Debug)]
pub struct ScaleBranch {
    pub scale: f64,
    /// `[C_s, D_m, 3, 3]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub branches: Vec<ScaleBranch>,
}

fn scaled(n: usize, s: f64) -> usize {
    (n as f64 * s + 1e-9).floor() as usize
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, in_channels: usize, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .scales
            .iter()
            .map(|&scale| {
                let name = format!("{prefix}.scale_{}.conv", scale_key(scale));
                Ok(ScaleBranch {
                    scale,
                    weight: pb.param(
                        &format!("{name}.weight"),
                        &[cfg.channels, in_channels, 3, 3],
                        Init::FanIn,
                    )?,
                    bias: pb.param(&format!("{name}.bias"), &[cfg.channels], Init::Zeros)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }

    pub fn output_channels(&self) -> usize {
        self.branches.iter().map(|b| b.weight.dims()[0]).sum()
    }

    /// `tokens` is `[B, gh*gw, D_m]`; returns `F` channels-last as
    /// `[B, H, W, ΣC_s]`.
    ///
    /// Per branch: bilinear resize of the token grid by `scale`, 3x3
    /// convolution (zero padding), bilinear resize to `target`; branches are
    /// concatenated along channels.
    pub fn decode(&self, tokens: &Tensor, grid: (usize, usize), target: (usize, usize)) -> Result<Tensor> {
        let (b, n, d) = tokens.dims3()?;
        if n != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "{n} tokens do not form a {}x{} grid",
                grid.0, grid.1
            )));
        }
        let x = tokens.contiguous()?.reshape((b, grid.0, grid.1, d))?;
        let mut maps = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let size = (scaled(grid.0, br.scale), scaled(grid.1, br.scale));
            if size.0 == 0 || size.1 == 0 {
                return Err(Error::Shape(format!(
                    "scale {} collapses a {}x{} grid",
                    br.scale, grid.0, grid.1
                )));
            }
            let y = resize_nhwc(&x, size)?;
            let y = conv3x3(&y, &br.weight, &br.bias)?;
            maps.push(resize_nhwc(&y, target)?);
        }
        Ok(Tensor::cat(&maps, 3)?)
    }
}

/// 3x3 convolution, stride 1, zero padding 1, on channels-last input.
/// `x` is `[B, H, W, C]`, `weight` `[O, C, 3, 3]`, `bias` `[O]`; returns
/// `[B, H, W, O]`.
///
/// Every pixel is first multiplied by all nine taps at once (`[C] -> [9, O]`);
/// the shifted partial sums are then gathered by [`Col2im3x3`] with the taps in
/// reversed order. For `O < C` this moves far less memory than im2col.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != 3 || kw != 3 {
        return Err(Error::Shape(format!("conv3x3 weight {:?} for input {:?}", weight.dims(), x.dims())));
    }
    let rev = Tensor::new(&[2u32, 1, 0], weight.device())?;
    let wmat = weight
        .index_select(&rev, 2)?
        .index_select(&rev, 3)?
        .permute((2, 3, 0, 1))?
        .contiguous()?
        .reshape((9 * o, c))?;
    let partial = x.contiguous()?.reshape((b * h * w, c))?.matmul(&wmat.t()?)?;
    let y = partial.reshape((b, h, w, 9 * o))?.apply_op1(Col2im3x3)?;
    Ok(y.broadcast_add(bias)?)
}

/// `[B, H, W, C] -> [B, H, W, 9C]`: the zero-padded 3x3 neighbourhood of every
/// pixel, ordered (ky, kx, c). Candle's strided narrow/cat route is far
/// slower on CPU, hence hand-written kernels.
struct Im2col3x3;

/// Adjoint of [`Im2col3x3`]: scatters `[B, H, W, 9C]` back to `[B, H, W, C]`.
struct Col2im3x3;

fn nhwc_of(layout: &Layout, what: &str) -> candle_core::Result<(usize, usize, usize, usize, usize)> {
    let Some((start, _)) = layout.contiguous_offsets() else {
        candle_core::bail!("{what} needs a contiguous input")
    };
    let (b, h, w, c) = layout.shape().dims4()?;
    Ok((start, b, h, w, c))
}

/// Calls `f(dst, src)` for every (output column, input pixel) pair linked by
/// a 3x3 tap, both as flat offsets excluding the channel.
fn for_each_tap(b: usize, h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize)) {
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let col = ((n * h + y) * w + x) * 9 * c;
                for dy in 0..3 {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for dx in 0..3 {
                        let Some(sx) = (x + dx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        f(col + (dy * 3 + dx) * c, ((n * h + sy) * w + sx) * c);
                    }
                }
            }
        }
    }
}

fn im2col<T: Copy + Default>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); b * h * w * 9 * c];
    for_each_tap(b, h, w, c, |d, s| out[d..d + c].copy_from_slice(&src[s..s + c]));
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); b * h * w * c];
    for_each_tap(b, h, w, c, |d, s| {
        for (o, v) in out[s..s + c].iter_mut().zip(&src[d..d + c]) {
            *o += *v;
        }
    });
    out
}

impl CustomOp1 for Im2col3x3 {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (o, b, h, w, c) = nhwc_of(layout, self.name())?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(&v[o..], b, h, w, c)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(&v[o..], b, h, w, c)),
            _ => candle_core::bail!("im2col3x3 supports f32/f64 only"),
        };
        Ok((out, Shape::from((b, h, w, 9 * c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2im3x3)?))
    }
}

impl CustomOp1 for Col2im3x3 {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (o, b, h, w, c9) = nhwc_of(layout, self.name())?;
        if c9 % 9 != 0 {
            candle_core::bail!("col2im3x3 expects a multiple of 9 channels, got {c9}")
        }
        let c = c9 / 9;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(&v[o..], b, h, w, c)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(&v[o..], b, h, w, c)),
            _ => candle_core::bail!("col2im3x3 supports f32/f64 only"),
        };
        Ok((out, Shape::from((b, h, w, c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2col3x3)?))
    }
}

pub fn decode(tokens: &Tensor, grid: (usize, usize), target: (usize, usize), decoder: &Decoder) -> Result<Tensor> {
    decoder.decode(tokens, grid, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn build(scales: Vec<f64>, channels: usize, d: usize) -> Decoder {
        let mut pb = ParamBuilder::new(3, DType::F64, &Device::Cpu);
        Decoder::new(&mut pb, "decoder", d, &DecoderConfig { scales, channels }).unwrap()
    }

    #[test]
    fn toy_shape() {
        let dec = build(vec![0.5, 2.0, 4.0], 4, 8);
        let x = Tensor::randn(0f64, 1.0, (1, 16, 8), &Device::Cpu).unwrap();
        let f = dec.decode(&x, (4, 4), (64, 64)).unwrap();
        assert_eq!(f.dims(), &[1, 64, 64, 12]);
    }

    #[test]
    fn zero_convs_give_zero_map() {
        let mut dec = build(vec![0.5, 2.0, 4.0], 4, 8);
        for br in &mut dec.branches {
            br.weight = br.weight.zeros_like().unwrap();
        }
        let x = Tensor::randn(0f64, 1.0, (2, 16, 8), &Device::Cpu).unwrap();
        let f = dec.decode(&x, (4, 4), (16, 16)).unwrap();
        let m = f.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn identity_conv_on_constant_grid() {
        let mut dec = build(vec![1.0], 1, 1);
        let mut k = vec![0.0f64; 9];
        k[4] = 1.0;
        dec.branches[0].weight = Tensor::from_vec(k, (1, 1, 3, 3), &Device::Cpu).unwrap();
        let x = Tensor::full(0.37f64, (1, 9, 1), &Device::Cpu).unwrap();
        let f = dec.decode(&x, (3, 3), (12, 12)).unwrap();
        for v in f.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap();
        let bias = Tensor::randn(0f64, 1.0, 4, &dev).unwrap();
        let a = conv3x3(&x.permute((0, 2, 3, 1)).unwrap(), &w, &bias)
            .unwrap()
            .permute((0, 3, 1, 2))
            .unwrap();
        let b = x
            .conv2d(&w, 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&bias.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn im2col_matches_narrow_route() {
        let x = Tensor::randn(0f64, 1.0, (2, 4, 3, 5), &Device::Cpu).unwrap();
        let p = x.pad_with_zeros(1, 1, 1).unwrap().pad_with_zeros(2, 1, 1).unwrap();
        let mut taps = Vec::new();
        for dy in 0..3 {
            for dx in 0..3 {
                taps.push(p.narrow(1, dy, 4).unwrap().narrow(2, dx, 3).unwrap());
            }
        }
        let a = Tensor::cat(&taps, 3).unwrap();
        let b = x.apply_op1(Im2col3x3).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap(), b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn col2im_is_adjoint() {
        // <im2col(x), y> = <x, col2im(y)>
        let x = Tensor::randn(0f64, 1.0, (1, 3, 4, 2), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f64, 1.0, (1, 3, 4, 18), &Device::Cpu).unwrap();
        let l = (x.apply_op1(Im2col3x3).unwrap() * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let r = (x * y.apply_op1(Col2im3x3).unwrap()).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((l - r).abs() < 1e-12);
    }

    #[test]
    fn scale_keys() {
        assert_eq!(scale_key(0.5), "0p5");
        assert_eq!(scale_key(2.0), "2");
    }

    #[test]
    fn collapsing_scale_is_error() {
        let dec = build(vec![0.25], 2, 4);
        let x = Tensor::zeros((1, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(dec.decode(&x, (2, 2), (8, 8)).is_err());
    }
}
