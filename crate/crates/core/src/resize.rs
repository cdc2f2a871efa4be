//! Bilinear resampling expressed as products with fixed interpolation matrices,
//! so gradients flow through ordinary matmul.
//!
//! Convention: half-pixel centers (`align_corners = false`), source coordinate
//! `(dst + 0.5) * in / out - 0.5` clamped at zero, no antialiasing. This is the
//! convention of the common deep-learning `bilinear` interpolate.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Row-major `[out_len, in_len]` 1-D bilinear interpolation weights.
pub fn bilinear_weights(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut w = vec![0.0; out_len * in_len];
    if in_len == 0 || out_len == 0 {
        return w;
    }
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
        w[i * in_len + i0] += 1.0 - frac;
        w[i * in_len + i1] += frac;
    }
    w
}

fn weight_tensor(in_len: usize, out_len: usize, like: &Tensor) -> Result<Tensor> {
    let w = bilinear_weights(in_len, out_len);
    Ok(Tensor::from_vec(w, (out_len, in_len), like.device())?.to_dtype(like.dtype())?)
}

/// Resizes a token grid `[B, h*w, C]` (row-major) to `[B, H*W, C]`.
pub fn resize_tokens(x: &Tensor, from: (usize, usize), to: (usize, usize)) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != from.0 * from.1 {
        return Err(Error::Shape(format!(
            "token count {n} does not match grid {}x{}",
            from.0, from.1
        )));
    }
    if from == to {
        return Ok(x.clone());
    }
    let out = resize_nhwc(&x.reshape((b, from.0, from.1, c))?, to)?;
    Ok(out.reshape((b, to.0 * to.1, c))?)
}

/// Resizes channels-last `[B, h, w, C]` to `[B, H, W, C]` with two batched
/// left-multiplications and no transposes.
pub fn resize_nhwc(x: &Tensor, to: (usize, usize)) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let (oh, ow) = to;
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("cannot resize to {oh}x{ow}")));
    }
    if (h, w) == to {
        return Ok(x.clone());
    }
    let x = x.contiguous()?;
    let x = if h == oh {
        x
    } else {
        let ah = weight_tensor(h, oh, &x)?;
        ah.broadcast_matmul(&x.reshape((b, h, w * c))?)?
    };
    let x = if w == ow {
        x.reshape((b, oh, w, c))?
    } else {
        let aw = weight_tensor(w, ow, &x)?;
        aw.broadcast_matmul(&x.reshape((b * oh, w, c))?)?
    };
    Ok(x.reshape((b, oh, ow, c))?)
}

/// Resizes `[B, C, h, w]` to `[B, C, H, W]`.
pub fn resize_nchw(x: &Tensor, to: (usize, usize)) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = to;
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("cannot resize to {oh}x{ow}")));
    }
    if (h, w) == to {
        return Ok(x.clone());
    }
    let aw_t = weight_tensor(w, ow, x)?.t()?;
    let ah_t = weight_tensor(h, oh, x)?.t()?;
    // Width pass on rows, then height pass on transposed rows.
    let rows = x.contiguous()?.reshape((b * c * h, w))?.matmul(&aw_t)?;
    let cols = rows
        .reshape((b * c, h, ow))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * ow, h))?
        .matmul(&ah_t)?;
    Ok(cols
        .reshape((b * c, ow, oh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, oh, ow))?)
}
