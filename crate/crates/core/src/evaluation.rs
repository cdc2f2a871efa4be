//! Pixel- and image-level metrics and their aggregation by generator subset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use crate::data::{Label, Manifest};
use crate::engine::{predict_prepared, prepare, ModelState};
use crate::error::{Error, Result};
use crate::robustness::DegradationKind;

/// Pixel confusion counts with "positive" = manipulated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn count(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p > 0, g > 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// `(f1, iou)`; `(1, 1)` when both masks are empty.
    pub fn scores(self) -> (f64, f64) {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if tp + fp + fn_ == 0.0 {
            return (1.0, 1.0);
        }
        (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
    }
}

/// `(f1, iou)` of a binary prediction against a binary ground truth, both
/// row-major with equal length. Any nonzero value counts as positive.
pub fn pixel_metrics(pred: &[u8], gt: &[u8]) -> Result<(f64, f64)> {
    Ok(Confusion::count(pred, gt)?.scores())
}

fn binary_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let d = 2 * tp + fp + fn_;
    if d == 0 {
        0.0
    } else {
        2.0 * tp as f64 / d as f64
    }
}

/// `(f1 on the fake class, accuracy)` with prediction `p_fake > threshold`.
pub fn image_metrics(p_fakes: &[f64], labels: &[Label], threshold: f64) -> Result<(f64, f64)> {
    if p_fakes.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", p_fakes.len(), labels.len())));
    }
    if p_fakes.is_empty() {
        return Err(Error::Validation("image metrics need at least one prediction".into()));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0, 0, 0, 0);
    for (&p, &l) in p_fakes.iter().zip(labels) {
        let pred = p > threshold;
        let truth = l.is_fake();
        correct += usize::from(pred == truth);
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok((binary_f1(tp, fp, fn_), correct as f64 / p_fakes.len() as f64))
}

/// Per-image evaluation outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub subset: String,
    pub label: Label,
    pub p_fake: f64,
    /// Pixel counts against the ground-truth mask, or `None` for images whose
    /// ground truth is empty (excluded from localization metrics).
    pub pixel: Option<Confusion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub subset: String,
    pub n_images: usize,
    /// Absent for subsets without manipulated images.
    pub pixel_iou: Option<f64>,
    pub pixel_f1: Option<f64>,
    pub image_f1: f64,
    pub image_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subsets: Vec<SubsetMetrics>,
    /// Arithmetic mean of the subset rows (`subset = "AVG"`).
    pub average: SubsetMetrics,
    pub micro_pixel: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Threshold on `sigmoid(M_fake)` and on `p_fake`.
    pub threshold: f64,
    /// Pool pixel counts over a subset instead of averaging per image.
    pub micro_pixel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            micro_pixel: false,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn subset_row(subset: &str, records: &[&ImageRecord], cfg: &EvalConfig) -> Result<SubsetMetrics> {
    let p: Vec<f64> = records.iter().map(|r| r.p_fake).collect();
    let l: Vec<Label> = records.iter().map(|r| r.label).collect();
    let (image_f1, image_acc) = image_metrics(&p, &l, cfg.threshold)?;
    let pixel: Vec<Confusion> = records.iter().filter_map(|r| r.pixel).collect();
    let (pixel_f1, pixel_iou) = if pixel.is_empty() {
        (None, None)
    } else if cfg.micro_pixel {
        let (f, i) = pixel.iter().fold(Confusion::default(), |a, &c| a.add(c)).scores();
        (Some(f), Some(i))
    } else {
        (
            mean(pixel.iter().map(|c| c.scores().0)),
            mean(pixel.iter().map(|c| c.scores().1)),
        )
    };
    Ok(SubsetMetrics {
        subset: subset.to_string(),
        n_images: records.len(),
        pixel_iou,
        pixel_f1,
        image_f1,
        image_acc,
    })
}

/// Groups records by subset (sorted by name) and appends the AVG row.
pub fn aggregate(records: &[ImageRecord], cfg: &EvalConfig) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.subset.as_str()).or_default().push(r);
    }
    let subsets = groups
        .iter()
        .map(|(name, rs)| subset_row(name, rs, cfg))
        .collect::<Result<Vec<_>>>()?;
    let average = SubsetMetrics {
        subset: "AVG".into(),
        n_images: records.len(),
        pixel_iou: mean(subsets.iter().filter_map(|s| s.pixel_iou)),
        pixel_f1: mean(subsets.iter().filter_map(|s| s.pixel_f1)),
        image_f1: mean(subsets.iter().map(|s| s.image_f1)).unwrap_or(0.0),
        image_acc: mean(subsets.iter().map(|s| s.image_acc)).unwrap_or(0.0),
    };
    Ok(MetricReport {
        subsets,
        average,
        micro_pixel: cfg.micro_pixel,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn rows(&self) -> impl Iterator<Item = &SubsetMetrics> {
        self.subsets.iter().chain(std::iter::once(&self.average))
    }

    /// One row per subset plus AVG; absent pixel metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subset,n_images,pixel_IoU,pixel_F1,image_F1,image_Acc\n");
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                r.subset,
                r.n_images,
                cell(r.pixel_iou),
                cell(r.pixel_f1),
                r.image_f1,
                r.image_acc
            );
        }
        s
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Validation(e.to_string()))?;
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
    }
}

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 16;

/// Runs the model over `manifest` and aggregates per generator tag. Ground
/// truth masks are resized (nearest) to the model's mask size when needed;
/// `degradation` is applied after resizing to the model input.
pub fn evaluate(
    state: &ModelState,
    manifest: &Manifest,
    cfg: &EvalConfig,
    degradation: Option<(DegradationKind, u32)>,
) -> Result<(MetricReport, Vec<ImageRecord>)> {
    if manifest.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    let mut records = Vec::with_capacity(manifest.len());
    let indices: Vec<usize> = (0..manifest.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let samples = chunk.iter().map(|&i| manifest.load_sample(i)).collect::<Result<Vec<_>>>()?;
        let views = samples
            .iter()
            .map(|s| prepare(state, &s.image, degradation))
            .collect::<Result<Vec<_>>>()?;
        let crops: Vec<_> = views.iter().map(|v| &v.0).collect();
        let clips: Vec<_> = views.iter().map(|v| &v.1).collect();
        let preds = predict_prepared(state, &crops, &clips)?;
        for (s, p) in samples.iter().zip(preds) {
            let gt = if s.mask.dimensions() == (p.width, p.height) {
                s.mask.clone()
            } else {
                imageops::resize(&s.mask, p.width, p.height, FilterType::Nearest)
            };
            let pixel = if gt.pixels().any(|v| v.0[0] > 0) {
                Some(Confusion::count(p.mask_binary(cfg.threshold).as_raw(), gt.as_raw())?)
            } else {
                None
            };
            records.push(ImageRecord {
                id: s.id.clone(),
                subset: s.generator_tag.clone(),
                label: s.label,
                p_fake: p.p_fake,
                pixel,
            });
        }
    }
    Ok((aggregate(&records, cfg)?, records))
}
