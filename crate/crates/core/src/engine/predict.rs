use candle_core::DType;
use image::{GrayImage, Luma, Rgb32FImage};

use crate::data::{images_to_tensor, resize_rgb};
use crate::error::{Error, Result};
use crate::robustness::{degrade, DegradationKind};

use super::state::ModelState;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_fake: f64,
    pub p_real: f64,
    /// `M_fake`, row-major `height x width` at the spatial input size.
    pub mask_logits: Vec<f64>,
    pub width: u32,
    pub height: u32,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Prediction {
    pub fn probability(&self) -> Vec<f64> {
        self.mask_logits.iter().map(|&l| sigmoid(l)).collect()
    }

    /// `sigmoid(M_fake)` quantized to 0..=255.
    pub fn probability_map(&self) -> GrayImage {
        let p = self.probability();
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([(p[(y * self.width + x) as usize] * 255.0).round() as u8])
        })
    }

    /// `sigmoid(M_fake) > threshold` as a {0, 1} mask.
    pub fn mask_binary(&self, threshold: f64) -> GrayImage {
        let p = self.probability();
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([u8::from(p[(y * self.width + x) as usize] > threshold)])
        })
    }
}

/// Spatial-encoder input and semantic view of an arbitrary image: resize to
/// the model input, optionally degrade, then resize for the semantic encoder.
pub fn prepare(state: &ModelState, image: &Rgb32FImage, degradation: Option<(DegradationKind, u32)>) -> Result<(Rgb32FImage, Rgb32FImage)> {
    let cfg = &state.model.config;
    let mut crop = resize_rgb(image, cfg.spatial.input_size as u32);
    if let Some((kind, level)) = degradation {
        crop = degrade(&crop, kind, level)?;
    }
    let clip = resize_rgb(&crop, cfg.semantic.input_size as u32);
    Ok((crop, clip))
}

/// Forward pass on prepared views.
pub fn predict_prepared(state: &ModelState, crops: &[&Rgb32FImage], clips: &[&Rgb32FImage]) -> Result<Vec<Prediction>> {
    if crops.len() != clips.len() {
        return Err(Error::Shape(format!("{} crops vs {} semantic views", crops.len(), clips.len())));
    }
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    let model = &state.model;
    let (dtype, device) = (model.dtype(), model.device());
    let fwd = model.forward(&images_to_tensor(crops, dtype, device)?, &images_to_tensor(clips, dtype, device)?)?;
    let probs = model
        .class_probs(&fwd, state.setup.loss.temperature)?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?;
    let (b, h, w) = fwd.masks.fake.dims3()?;
    let logits = fwd.masks.fake.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| Prediction {
            p_real: probs[i][0],
            p_fake: probs[i][1],
            mask_logits: logits[i * h * w..(i + 1) * h * w].to_vec(),
            width: w as u32,
            height: h as u32,
        })
        .collect())
}

pub fn predict(state: &ModelState, image: &Rgb32FImage) -> Result<Prediction> {
    let (crop, clip) = prepare(state, image, None)?;
    Ok(predict_prepared(state, &[&crop], &[&clip])?.remove(0))
}
