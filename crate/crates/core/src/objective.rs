//! Training objective: detection cross-entropy over cosine similarities,
//! per-pixel binary cross-entropy on `M_fake`, and an edge-weighted BCE that
//! up-weights a band around mask boundaries.

use candle_core::Tensor;
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_softmax_last;
use crate::spm::ClassEmbeddings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub w_ce: f64,
    pub w_bce: f64,
    pub w_edg: f64,
    /// Half-width of the square structuring element for the edge band.
    pub edge_radius: usize,
    /// Weight multiplier on the edge band.
    pub edge_gain: f64,
    /// Softmax temperature for the detection logits.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_ce: 1.0,
            w_bce: 1.0,
            w_edg: 1.0,
            edge_radius: 3,
            edge_gain: 4.0,
            temperature: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.w_ce, self.w_bce, self.w_edg].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.edge_radius < 1 {
            return Err(Error::Config("edge_radius must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(self.edge_gain.is_finite() && self.edge_gain >= 1.0) {
            return Err(Error::Config("edge_gain must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cosine-similarity logits `[B, 2]` (real, fake) scaled by `1/τ`.
/// `g` and the class embeddings are unit vectors, so dot products are cosines.
pub fn detection_logits(g: &Tensor, text: &ClassEmbeddings, temperature: f64) -> Result<Tensor> {
    let t = text.stacked()?;
    Ok((g.broadcast_matmul(&t.t()?)? / temperature)?)
}

/// Mean negative log-likelihood of the true class. `labels` is one-hot `[B, 2]`.
pub fn detection_loss(g: &Tensor, text: &ClassEmbeddings, labels: &Tensor, temperature: f64) -> Result<Tensor> {
    let logp = log_softmax_last(&detection_logits(g, text, temperature)?)?;
    Ok((logp * labels)?.sum(1)?.neg()?.mean_all()?)
}

/// `max(x, 0) - x·y + ln(1 + e^{-|x|})`, elementwise.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus_tail = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * target)?)? + softplus_tail)?)
}

fn window_filter(src: &[u8], h: usize, w: usize, r: usize, take_max: bool) -> Vec<u8> {
    let pick = |a: u8, b: u8| if take_max { a.max(b) } else { a.min(b) };
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            // Replicate border: clamped indices only ever revisit edge pixels,
            // which are already inside [lo, hi].
            let mut acc = src[y * w + x];
            for xx in lo..=hi {
                acc = pick(acc, src[y * w + xx]);
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = rows[y * w + x];
            for yy in lo..=hi {
                acc = pick(acc, rows[yy * w + x]);
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Boundary band of a binary mask: dilation minus erosion with a
/// `(2r+1)x(2r+1)` square, replicate border. Returned row-major, values {0,1}.
pub fn edge_band(mask: &GrayImage, radius: usize) -> Vec<u8> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let src: Vec<u8> = mask.as_raw().iter().map(|&v| u8::from(v > 0)).collect();
    let dil = window_filter(&src, h, w, radius, true);
    let ero = window_filter(&src, h, w, radius, false);
    dil.iter().zip(&ero).map(|(d, e)| d - e).collect()
}

/// Per-pixel weights `1 + (gain - 1)·band`, row-major.
pub fn edge_weight_map(mask: &GrayImage, radius: usize, gain: f64) -> Vec<f64> {
    edge_band(mask, radius)
        .into_iter()
        .map(|b| 1.0 + (gain - 1.0) * f64::from(b))
        .collect()
}

/// Scalar loss terms and their weighted total.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Tensor,
    pub ce: Tensor,
    pub bce: Tensor,
    pub edg: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub bce: f64,
    pub edg: f64,
}

impl LossTerms {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBreakdown {
            total: f(&self.total)?,
            ce: f(&self.ce)?,
            bce: f(&self.bce)?,
            edg: f(&self.edg)?,
        })
    }
}

/// Supervision for one batch.
#[derive(Clone, Debug)]
pub struct Targets {
    /// `[B, H, W]` with values {0, 1}.
    pub masks: Tensor,
    /// `[B, H, W]` edge weights from [`edge_weight_map`].
    pub edge_weights: Tensor,
    /// One-hot `[B, 2]` (real, fake).
    pub labels: Tensor,
}

/// `w_ce·L_CE + w_bce·L_BCE + w_edg·L_EDG`.
///
/// `L_BCE` is the mean per-pixel BCE of `sigmoid(M_fake)` against the mask;
/// `L_EDG` is the mean of the same per-pixel BCE multiplied by the edge
/// weights. Non-finite logits are rejected.
pub fn combined_loss(
    mask_logits: &Tensor,
    g: &Tensor,
    text: &ClassEmbeddings,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if mask_logits.dims() != targets.masks.dims() || mask_logits.dims() != targets.edge_weights.dims() {
        return Err(Error::Shape(format!(
            "mask logits {:?} vs masks {:?} vs edge weights {:?}",
            mask_logits.dims(),
            targets.masks.dims(),
            targets.edge_weights.dims()
        )));
    }
    let probe = mask_logits
        .sum_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    if !probe.is_finite() {
        return Err(Error::Numeric {
            what: "mask logits".into(),
            step: 0,
        });
    }
    let ce = detection_loss(g, text, &targets.labels, cfg.temperature)?;
    let per_pixel = bce_with_logits(mask_logits, &targets.masks)?;
    let bce = per_pixel.mean_all()?;
    let edg = (&per_pixel * &targets.edge_weights)?.mean_all()?;
    let total = (((&ce * cfg.w_ce)? + (&bce * cfg.w_bce)?)? + (&edg * cfg.w_edg)?)?;
    Ok(LossTerms { total, ce, bce, edg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn emb(real: &[f64], fake: &[f64]) -> ClassEmbeddings {
        ClassEmbeddings {
            real: Tensor::new(real, &Device::Cpu).unwrap(),
            fake: Tensor::new(fake, &Device::Cpu).unwrap(),
        }
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn detection_loss_orthogonal_unit_temperature() {
        let text = emb(&[1.0, 0.0], &[0.0, 1.0]);
        let g = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
        let label = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
        let l = scalar(&detection_loss(&g, &text, &label, 1.0).unwrap());
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn detection_loss_tie_is_ln2() {
        let s = 0.5f64.sqrt();
        let text = emb(&[1.0, 0.0], &[0.0, 1.0]);
        let g = Tensor::new(&[[s, s]], &Device::Cpu).unwrap();
        for label in [[1.0f64, 0.0], [0.0, 1.0]] {
            let y = Tensor::new(&[label], &Device::Cpu).unwrap();
            let l = scalar(&detection_loss(&g, &text, &y, 0.07).unwrap());
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_loss_sharp_temperature_vanishes() {
        let text = emb(&[1.0, 0.0], &[0.6, 0.8]);
        let g = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
        let y = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
        let l = scalar(&detection_loss(&g, &text, &y, 1e-3).unwrap());
        assert!(l < 1e-12);
    }

    #[test]
    fn edge_band_centered_block() {
        let mut m = GrayImage::new(5, 5);
        for y in 1..4 {
            for x in 1..4 {
                m.put_pixel(x, y, image::Luma([1]));
            }
        }
        let band = edge_band(&m, 1);
        assert_eq!(band.iter().map(|&b| b as usize).sum::<usize>(), 24);
        assert_eq!(band[12], 0);
    }

    #[test]
    fn edge_band_empty_for_uniform_masks() {
        let zeros = GrayImage::new(6, 4);
        assert!(edge_weight_map(&zeros, 1, 4.0).iter().all(|&w| w == 1.0));
        let ones = GrayImage::from_pixel(6, 4, image::Luma([1]));
        assert!(edge_weight_map(&ones, 1, 4.0).iter().all(|&w| w == 1.0));
    }

    fn targets(mask: &[f64], weights: &[f64], h: usize, w: usize, label_fake: bool) -> Targets {
        let dev = Device::Cpu;
        Targets {
            masks: Tensor::from_slice(mask, (1, h, w), &dev).unwrap(),
            edge_weights: Tensor::from_slice(weights, (1, h, w), &dev).unwrap(),
            labels: Tensor::new(&[[f64::from(!label_fake as u8), f64::from(label_fake as u8)]], &dev).unwrap(),
        }
    }

    #[test]
    fn bce_at_half_probability_is_ln2() {
        let text = emb(&[1.0, 0.0], &[0.0, 1.0]);
        let g = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
        let logits = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let t = targets(&[0., 1., 1., 0.], &[1.0; 4], 2, 2, true);
        let terms = combined_loss(&logits, &g, &text, &t, &LossConfig::default()).unwrap();
        let b = terms.breakdown().unwrap();
        assert!((b.bce - 2f64.ln()).abs() < 1e-12);
        assert!((b.edg - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_total_vanishes() {
        let text = emb(&[1.0, 0.0], &[0.0, 1.0]);
        let g = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
        let logits = Tensor::new(&[[[-60.0f64, 60.0], [60.0, -60.0]]], &Device::Cpu).unwrap();
        let t = targets(&[0., 1., 1., 0.], &[1., 4., 4., 1.], 2, 2, true);
        let cfg = LossConfig {
            temperature: 1e-3,
            ..LossConfig::default()
        };
        let b = combined_loss(&logits, &g, &text, &t, &cfg).unwrap().breakdown().unwrap();
        assert!(b.total < 1e-20, "{b:?}");
    }

    #[test]
    fn zero_edge_weight_matches_two_term_total() {
        let text = emb(&[1.0, 0.0], &[0.6, 0.8]);
        let g = Tensor::new(&[[0.28f64, 0.96]], &Device::Cpu).unwrap();
        let logits = Tensor::new(&[[[0.3f64, -1.2], [2.0, 0.1]]], &Device::Cpu).unwrap();
        let t = targets(&[0., 1., 1., 0.], &[1., 4., 4., 1.], 2, 2, true);
        let cfg = LossConfig {
            w_ce: 1.0,
            w_bce: 1.0,
            w_edg: 0.0,
            ..LossConfig::default()
        };
        let b = combined_loss(&logits, &g, &text, &t, &cfg).unwrap().breakdown().unwrap();
        assert_eq!(b.total, b.ce + b.bce);
    }

    #[test]
    fn nan_logits_rejected() {
        let text = emb(&[1.0, 0.0], &[0.0, 1.0]);
        let g = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
        let logits = Tensor::new(&[[[f64::NAN, 0.0]]], &Device::Cpu).unwrap();
        let t = targets(&[0., 1.], &[1., 1.], 1, 2, true);
        let err = combined_loss(&logits, &g, &text, &t, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn bce_finite_for_large_logits() {
        let x = Tensor::new(&[80.0f64, -80.0, 0.0], &Device::Cpu).unwrap();
        let y = Tensor::new(&[0.0f64, 1.0, 1.0], &Device::Cpu).unwrap();
        let l = bce_with_logits(&x, &y).unwrap().to_vec1::<f64>().unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
        assert!((l[0] - 80.0).abs() < 1e-9);
    }
}
