//! Gaussian-blur and JPEG degradations and the sweep over their levels.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, Rgb32FImage};
use serde::{Deserialize, Serialize};

use crate::data::{to_rgb8, Manifest};
use crate::engine::ModelState;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, MetricReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianBlur,
    Jpeg,
}

impl DegradationKind {
    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::GaussianBlur => "gaussian_blur",
            DegradationKind::Jpeg => "jpeg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub levels: Vec<u32>,
}

impl DegradationSpec {
    /// Odd kernels 3, 5, ..., 23.
    pub fn blur() -> Self {
        Self {
            kind: DegradationKind::GaussianBlur,
            levels: (3..=23).step_by(2).collect(),
        }
    }

    /// Qualities 100, 90, ..., 60.
    pub fn jpeg() -> Self {
        Self {
            kind: DegradationKind::Jpeg,
            levels: (0..5).map(|i| 100 - 10 * i).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config(format!("{} sweep has no levels", self.kind.name())));
        }
        for &l in &self.levels {
            check_level(self.kind, l)?;
        }
        Ok(())
    }
}

/// Kernel 1 is accepted as an identity passthrough below the protocol range.
fn check_level(kind: DegradationKind, level: u32) -> Result<()> {
    let ok = match kind {
        DegradationKind::GaussianBlur => level % 2 == 1,
        DegradationKind::Jpeg => (1..=100).contains(&level),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidLevel {
            kind: kind.name().into(),
            level,
        })
    }
}

/// `σ = 0.3·((k − 1)/2 − 1) + 0.8`.
pub fn blur_sigma(kernel: u32) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

pub fn gaussian_kernel(kernel: u32) -> Vec<f64> {
    let sigma = blur_sigma(kernel);
    let r = (kernel / 2) as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicate border. `kernel == 1` returns the
/// input unchanged.
pub fn gaussian_blur(image: &Rgb32FImage, kernel: u32) -> Result<Rgb32FImage> {
    check_level(DegradationKind::GaussianBlur, kernel)?;
    if kernel == 1 {
        return Ok(image.clone());
    }
    let k = gaussian_kernel(kernel);
    let r = (kernel / 2) as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let src: Vec<f64> = image.as_raw().iter().map(|&v| f64::from(v)).collect();
    let at = |x: i64, y: i64, c: usize| ((y * w + x) * 3) as usize + c;
    let mut rows = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                rows[at(x, y, c)] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * src[at((x + j as i64 - r).clamp(0, w - 1), y, c)])
                    .sum();
            }
        }
    }
    let mut out = Rgb32FImage::new(image.width(), image.height());
    let buf: &mut [f32] = &mut out;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * rows[at(x, (y + j as i64 - r).clamp(0, h - 1), c)])
                    .sum();
                buf[at(x, y, c)] = v as f32;
            }
        }
    }
    Ok(out)
}

/// Encode at `quality` as 8-bit JPEG and decode back.
pub fn jpeg_roundtrip(image: &Rgb32FImage, quality: u32) -> Result<Rgb32FImage> {
    check_level(DegradationKind::Jpeg, quality)?;
    let rgb = to_rgb8(image);
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality as u8)
        .encode_image(&rgb)
        .map_err(|e| Error::image("<jpeg>", e))?;
    let decoded = image::load(Cursor::new(bytes), ImageFormat::Jpeg).map_err(|e| Error::image("<jpeg>", e))?;
    Ok(decoded.to_rgb32f())
}

pub fn degrade(image: &Rgb32FImage, kind: DegradationKind, level: u32) -> Result<Rgb32FImage> {
    match kind {
        DegradationKind::GaussianBlur => gaussian_blur(image, level),
        DegradationKind::Jpeg => jpeg_roundtrip(image, level),
    }
}

/// Reports for every (kind, level) of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kind: DegradationKind,
    pub level: u32,
    pub report: MetricReport,
}

/// One long-form CSV row; `value` is `None` for absent pixel metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: DegradationKind,
    pub level: u32,
    pub subset: String,
    pub metric: &'static str,
    pub value: Option<f64>,
}

pub const SWEEP_METRICS: [&str; 4] = ["pixel_IoU", "pixel_F1", "image_F1", "image_Acc"];

impl SweepResult {
    /// Rows per point, subset (AVG last) and metric.
    pub fn rows(&self) -> Vec<SweepRow> {
        let mut out = Vec::new();
        for p in &self.points {
            for s in p.report.rows() {
                let values = [s.pixel_iou, s.pixel_f1, Some(s.image_f1), Some(s.image_acc)];
                for (metric, value) in SWEEP_METRICS.into_iter().zip(values) {
                    out.push(SweepRow {
                        kind: p.kind,
                        level: p.level,
                        subset: s.subset.clone(),
                        metric,
                        value,
                    });
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,level,subset,metric,value\n");
        for r in self.rows() {
            let v = r.value.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", r.kind.name(), r.level, r.subset, r.metric, v));
        }
        s
    }

    /// `(level, value)` series of one metric on the AVG row for `kind`.
    pub fn curve(&self, kind: DegradationKind, metric: &str) -> Vec<(u32, f64)> {
        self.rows()
            .into_iter()
            .filter(|r| r.kind == kind && r.metric == metric && r.subset == "AVG")
            .filter_map(|r| r.value.map(|v| (r.level, v)))
            .collect()
    }
}

/// Evaluates `manifest` once per level of every spec.
pub fn sweep(state: &ModelState, manifest: &Manifest, specs: &[DegradationSpec], cfg: &EvalConfig) -> Result<SweepResult> {
    for s in specs {
        s.validate()?;
    }
    let mut points = Vec::new();
    for spec in specs {
        for &level in &spec.levels {
            log::info!("sweep {} level {level}", spec.kind.name());
            let (report, _) = evaluate(state, manifest, cfg, Some((spec.kind, level)))?;
            points.push(SweepPoint {
                kind: spec.kind,
                level,
                report,
            });
        }
    }
    Ok(SweepResult { points })
}
