//! Dataset manifests, image/mask I/O, training augmentation and synthetic
//! fixtures.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, Rgb32FImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::robustness::{gaussian_blur, jpeg_roundtrip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: Option<String>,
    pub label: Label,
    pub generator_tag: String,
    pub split: Split,
}

/// Ordered manifest entries. Relative paths resolve against `root`, the
/// directory containing the manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn load_sample(&self, index: usize) -> Result<ImageSample> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::Validation(format!("sample index {index} out of range")))?;
        let image_path = self.resolve(&e.image_path);
        let image = load_image(&image_path)?;
        let mask = match &e.mask_path {
            Some(m) => {
                let p = self.resolve(m);
                read_mask(&p)?
            }
            // Real images carry an empty mask, fakes without a mask are
            // fully generated.
            None => {
                let fill = u8::from(e.label.is_fake());
                GrayImage::from_pixel(image.width(), image.height(), Luma([fill]))
            }
        };
        let sample = ImageSample {
            id: e.id.clone(),
            image,
            mask,
            label: e.label,
            generator_tag: e.generator_tag.clone(),
            split: e.split,
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Decodes a grayscale PNG mask to values {0, 1}.
/// Any supported image file as RGB in [0, 1].
pub fn load_image(path: &Path) -> Result<Rgb32FImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb32f())
}

pub fn read_mask(path: &Path) -> Result<GrayImage> {
    let mut m = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    for p in m.pixels_mut() {
        p.0[0] = u8::from(p.0[0] >= 128);
    }
    Ok(m)
}

/// Writes a {0, 1} mask as a {0, 255} PNG.
pub fn write_mask(path: &Path, mask: &GrayImage) -> Result<()> {
    let mut out = mask.clone();
    for p in out.pixels_mut() {
        p.0[0] = if p.0[0] > 0 { 255 } else { 0 };
    }
    out.save(path).map_err(|e| Error::image(path, e))
}

pub fn to_rgb8(image: &Rgb32FImage) -> RgbImage {
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let p = image.get_pixel(x, y).0;
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    let manifest = Manifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
    };
    validate_manifest(&manifest)?;
    Ok(manifest)
}

fn validate_manifest(m: &Manifest) -> Result<()> {
    let mut seen = HashSet::new();
    for e in &m.entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Validation(format!("duplicate id {:?}", e.id)));
        }
    }
    let missing: Vec<String> = m
        .entries
        .iter()
        .flat_map(|e| std::iter::once(&e.image_path).chain(e.mask_path.as_ref()))
        .filter(|p| !m.resolve(p).is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!("missing files: {}", missing.join(", "))));
    }
    for e in &m.entries {
        if let (Label::Real, Some(mp)) = (e.label, &e.mask_path) {
            let mask = read_mask(&m.resolve(mp))?;
            if mask.pixels().any(|p| p.0[0] > 0) {
                return Err(Error::Validation(format!("real sample {:?} has a nonzero mask", e.id)));
            }
        }
    }
    Ok(())
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        serde_json::to_writer(&mut out, e).map_err(|err| Error::Validation(err.to_string()))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    /// RGB in [0, 1].
    pub image: Rgb32FImage,
    /// Values {0, 1}.
    pub mask: GrayImage,
    pub label: Label,
    pub generator_tag: String,
    pub split: Split,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.dimensions() != self.mask.dimensions() {
            return Err(Error::Validation(format!(
                "{}: image {:?} vs mask {:?}",
                self.id,
                self.image.dimensions(),
                self.mask.dimensions()
            )));
        }
        if self.mask.pixels().any(|p| p.0[0] > 1) {
            return Err(Error::Validation(format!("{}: mask values must be 0 or 1", self.id)));
        }
        if self.label == Label::Real && self.mask.pixels().any(|p| p.0[0] > 0) {
            return Err(Error::Validation(format!("{}: real sample with nonzero mask", self.id)));
        }
        Ok(())
    }

    pub fn positive_pixels(&self) -> usize {
        self.mask.pixels().filter(|p| p.0[0] > 0).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub blur_prob: f64,
    pub jpeg_prob: f64,
    pub scale_range: [f64; 2],
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub crop_size: u32,
    pub clip_input_size: u32,
    /// Odd kernel sizes drawn uniformly when blur fires.
    pub blur_kernels: Vec<u32>,
    /// Inclusive JPEG quality range drawn when compression fires.
    pub jpeg_quality: [u8; 2],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            blur_prob: 0.1,
            jpeg_prob: 0.1,
            scale_range: [0.8, 1.2],
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            crop_size: 512,
            clip_input_size: 224,
            blur_kernels: vec![3, 5, 7],
            jpeg_quality: [70, 100],
        }
    }
}

impl AugmentationConfig {
    /// No randomness: fixed scale, no flips, no degradations.
    pub fn identity(crop_size: u32, clip_input_size: u32) -> Self {
        Self {
            blur_prob: 0.0,
            jpeg_prob: 0.0,
            scale_range: [1.0, 1.0],
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            crop_size,
            clip_input_size,
            ..Self::default()
        }
    }

    pub fn validate(&self, spatial_patch: usize, semantic_patch: usize) -> Result<()> {
        for (name, p) in [
            ("blur_prob", self.blur_prob),
            ("jpeg_prob", self.jpeg_prob),
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("bad scale_range {:?}", self.scale_range)));
        }
        if self.crop_size == 0 || self.crop_size as usize % spatial_patch != 0 {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of {spatial_patch}",
                self.crop_size
            )));
        }
        if self.clip_input_size == 0 || self.clip_input_size as usize % semantic_patch != 0 {
            return Err(Error::Config(format!(
                "clip_input_size {} must be a positive multiple of {semantic_patch}",
                self.clip_input_size
            )));
        }
        if self.blur_kernels.iter().any(|k| k % 2 == 0) || (self.blur_prob > 0.0 && self.blur_kernels.is_empty()) {
            return Err(Error::Config(format!("blur_kernels must be odd: {:?}", self.blur_kernels)));
        }
        let [qlo, qhi] = self.jpeg_quality;
        if !(1 <= qlo && qlo <= qhi && qhi <= 100) {
            return Err(Error::Config(format!("bad jpeg_quality {:?}", self.jpeg_quality)));
        }
        Ok(())
    }
}

/// One training view: the crop fed to the spatial encoder and the same crop
/// resized for the semantic encoder.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub sample: ImageSample,
    pub clip_view: Rgb32FImage,
}

/// Reflect-101 index into `[0, n)`.
fn reflect(i: i64, n: i64) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as u32
}

fn pad_reflect<P: image::Pixel>(img: &image::ImageBuffer<P, Vec<P::Subpixel>>, w: u32, h: u32) -> image::ImageBuffer<P, Vec<P::Subpixel>> {
    let (iw, ih) = img.dimensions();
    let left = (w.saturating_sub(iw) / 2) as i64;
    let top = (h.saturating_sub(ih) / 2) as i64;
    image::ImageBuffer::from_fn(w.max(iw), h.max(ih), |x, y| {
        *img.get_pixel(reflect(x as i64 - left, iw as i64), reflect(y as i64 - top, ih as i64))
    })
}

pub fn resize_rgb(image: &Rgb32FImage, size: u32) -> Rgb32FImage {
    if image.dimensions() == (size, size) {
        image.clone()
    } else {
        imageops::resize(image, size, size, FilterType::Triangle)
    }
}

/// Random scale, flips, (pad-then-)crop applied to image and mask alike, then
/// blur / JPEG on the image only. Draws from `rng` in a fixed order, so a
/// fixed seed gives bitwise-identical output.
pub fn augment(sample: &ImageSample, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<Augmented> {
    sample.validate()?;
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();

    let [lo, hi] = cfg.scale_range;
    let s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    if (s - 1.0).abs() > 1e-12 {
        let w = ((image.width() as f64 * s).round() as u32).max(1);
        let h = ((image.height() as f64 * s).round() as u32).max(1);
        image = imageops::resize(&image, w, h, FilterType::Triangle);
        mask = imageops::resize(&mask, w, h, FilterType::Nearest);
    }
    if rng.random_bool(cfg.hflip_prob) {
        image = imageops::flip_horizontal(&image);
        mask = imageops::flip_horizontal(&mask);
    }
    if rng.random_bool(cfg.vflip_prob) {
        image = imageops::flip_vertical(&image);
        mask = imageops::flip_vertical(&mask);
    }
    let c = cfg.crop_size;
    if image.width() < c || image.height() < c {
        image = pad_reflect(&image, c, c);
        mask = pad_reflect(&mask, c, c);
    }
    let x0 = rng.random_range(0..=image.width() - c);
    let y0 = rng.random_range(0..=image.height() - c);
    if (x0, y0, image.width(), image.height()) != (0, 0, c, c) {
        image = imageops::crop_imm(&image, x0, y0, c, c).to_image();
        mask = imageops::crop_imm(&mask, x0, y0, c, c).to_image();
    }

    let blur = rng.random_bool(cfg.blur_prob);
    let kernel = if cfg.blur_kernels.is_empty() {
        1
    } else {
        cfg.blur_kernels[rng.random_range(0..cfg.blur_kernels.len())]
    };
    let jpeg = rng.random_bool(cfg.jpeg_prob);
    let quality = rng.random_range(cfg.jpeg_quality[0]..=cfg.jpeg_quality[1]);
    if blur {
        image = gaussian_blur(&image, kernel)?;
    }
    if jpeg {
        image = jpeg_roundtrip(&image, u32::from(quality))?;
    }

    let clip_view = resize_rgb(&image, cfg.clip_input_size);
    let out = ImageSample {
        image,
        mask,
        ..sample.clone()
    };
    Ok(Augmented { sample: out, clip_view })
}

/// Deterministic generator for one (seed, epoch, sample) triple.
pub fn sample_rng(seed: u64, epoch: u64, sample_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(sample_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `[B, 3, H, W]` from equally sized RGB images.
pub fn images_to_tensor(images: &[&Rgb32FImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = images
        .first()
        .map(|i| i.dimensions())
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", (w, h), img.dimensions())));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| p.0[c]));
        }
    }
    let t = Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// `[B, H, W]` with values {0, 1}.
pub fn masks_to_tensor(masks: &[&GrayImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = masks
        .first()
        .map(|m| m.dimensions())
        .ok_or_else(|| Error::Shape("empty mask batch".into()))?;
    let mut data = Vec::with_capacity(masks.len() * (w * h) as usize);
    for m in masks {
        if m.dimensions() != (w, h) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", (w, h), m.dimensions())));
        }
        data.extend(m.pixels().map(|p| f32::from(p.0[0].min(1))));
    }
    Ok(Tensor::from_vec(data, (masks.len(), h as usize, w as usize), device)?.to_dtype(dtype)?)
}

fn smooth_base(size: u32, rng: &mut ChaCha8Rng) -> Rgb32FImage {
    let a: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let gx: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let gy: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let noise = Normal::new(0.0f32, 0.02).expect("valid std");
    let n = size as f32;
    let mut img = Rgb32FImage::new(size, size);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (u, v) = (x as f32 / n - 0.5, y as f32 / n - 0.5);
        for c in 0..3 {
            p.0[c] = (a[c] + gx[c] * u + gy[c] * v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Synthetic dataset: even indices are real (smooth gradient plus noise), odd
/// indices fake (a fresh gradient with an 8-pixel-aligned rectangle replaced
/// by saturated stripes; mask = rectangle). Consecutive real/fake pairs share
/// a generator tag, alternating `fixture-a` / `fixture-b`. All samples are in
/// the train split.
pub fn make_fixtures(out_dir: &Path, n: usize, size: u32, rng: &mut ChaCha8Rng) -> Result<Manifest> {
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 fixtures, got {n}")));
    }
    if size < 32 {
        return Err(Error::Validation(format!("fixture size {size} < 32")));
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cells = size / 8;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
        let id = format!("fx{i:04}");
        let tag = if (i / 2) % 2 == 0 { "fixture-a" } else { "fixture-b" };
        let mut img = smooth_base(size, rng);
        let mut mask_path = None;
        if label == Label::Fake {
            let rw = rng.random_range(cells / 4..=cells / 2).max(1);
            let rh = rng.random_range(cells / 4..=cells / 2).max(1);
            let x0 = rng.random_range(0..=cells - rw) * 8;
            let y0 = rng.random_range(0..=cells - rh) * 8;
            let colors: [[f32; 3]; 2] = [
                std::array::from_fn(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }),
                std::array::from_fn(|_| if rng.random_bool(0.5) { 0.9 } else { 0.05 }),
            ];
            let diagonal = rng.random_bool(0.5);
            let mut mask = GrayImage::new(size, size);
            for y in y0..y0 + rh * 8 {
                for x in x0..x0 + rw * 8 {
                    let phase = if diagonal { (x + y) / 2 } else { x / 2 };
                    img.put_pixel(x, y, Rgb(colors[(phase % 2) as usize]));
                    mask.put_pixel(x, y, Luma([1]));
                }
            }
            let rel = format!("masks/{id}.png");
            write_mask(&out_dir.join(&rel), &mask)?;
            mask_path = Some(rel);
        }
        let rel = format!("images/{id}.png");
        let p = out_dir.join(&rel);
        to_rgb8(&img).save(&p).map_err(|e| Error::image(&p, e))?;
        entries.push(ManifestEntry {
            id,
            image_path: rel,
            mask_path,
            label,
            generator_tag: tag.to_string(),
            split: Split::Train,
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    save_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(size: u32, label: Label) -> ImageSample {
        let image = Rgb32FImage::from_fn(size, size, |x, y| Rgb([x as f32 / size as f32, y as f32 / size as f32, 0.5]));
        let mut mask = GrayImage::new(size, size);
        if label == Label::Fake {
            for y in 0..size {
                for x in 0..size / 2 {
                    mask.put_pixel(x, y, Luma([1]));
                }
            }
        }
        ImageSample {
            id: "s".into(),
            image,
            mask,
            label,
            generator_tag: "t".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn manifest_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_fixtures(dir.path(), 3, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = dir.path().join("manifest.jsonl");
        let back = load_manifest(&p).unwrap();
        assert_eq!(back, m);

        let text = std::fs::read_to_string(&p).unwrap();
        let first = text.lines().next().unwrap();
        std::fs::write(&p, format!("{text}{first}\n")).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Validation(msg)) if msg.contains("duplicate")));

        std::fs::write(&p, format!("{first}\n{{not json\n")).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 2, .. })));

        let dangling = first.replace("images/fx0000.png", "images/nope.png");
        std::fs::write(&p, format!("{dangling}\n")).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Validation(msg)) if msg.contains("nope.png")));
    }

    #[test]
    fn real_with_nonzero_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        make_fixtures(dir.path(), 2, 32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut m = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        m.entries[0].mask_path = m.entries[1].mask_path.clone();
        let p = dir.path().join("bad.jsonl");
        save_manifest(&p, &m).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Validation(msg)) if msg.contains("nonzero")));
    }

    #[test]
    fn fixtures_construction() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_fixtures(dir.path(), 16, 64, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(m.count(Label::Real), 8);
        assert_eq!(m.count(Label::Fake), 8);
        let real = m.load_sample(0).unwrap();
        let fake = m.load_sample(1).unwrap();
        assert_eq!(real.positive_pixels(), 0);
        assert!(fake.positive_pixels() > 0);
        assert_eq!(fake.positive_pixels() % 64, 0);
    }

    #[test]
    fn fully_generated_fake_gets_full_mask() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = make_fixtures(dir.path(), 2, 32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        m.entries[1].mask_path = None;
        let s = m.load_sample(1).unwrap();
        assert_eq!(s.positive_pixels(), 32 * 32);
    }

    #[test]
    fn identity_pipeline() {
        let s = sample(32, Label::Fake);
        let cfg = AugmentationConfig::identity(32, 32);
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.sample.image, s.image);
        assert_eq!(out.sample.mask, s.mask);
        assert_eq!(out.clip_view, s.image);
    }

    #[test]
    fn hflip_moves_left_half_to_right() {
        let s = sample(16, Label::Fake);
        let cfg = AugmentationConfig {
            hflip_prob: 1.0,
            ..AugmentationConfig::identity(16, 8)
        };
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (x, _, p) in out.sample.mask.enumerate_pixels() {
            assert_eq!(p.0[0], u8::from(x >= 8));
        }
        assert_eq!(out.clip_view.dimensions(), (8, 8));
    }

    #[test]
    fn pad_then_crop_for_small_inputs() {
        let s = sample(10, Label::Fake);
        let out = augment(&s, &AugmentationConfig::identity(16, 8), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.sample.image.dimensions(), (16, 16));
        assert_eq!(out.sample.mask.dimensions(), (16, 16));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<u32> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn same_seed_same_output() {
        let s = sample(40, Label::Fake);
        let cfg = AugmentationConfig {
            blur_prob: 0.5,
            jpeg_prob: 0.5,
            ..AugmentationConfig {
                crop_size: 32,
                clip_input_size: 16,
                ..AugmentationConfig::default()
            }
        };
        let a = augment(&s, &cfg, &mut sample_rng(5, 1, "x")).unwrap();
        let b = augment(&s, &cfg, &mut sample_rng(5, 1, "x")).unwrap();
        assert_eq!(a.sample.image, b.sample.image);
        assert_eq!(a.sample.mask, b.sample.mask);
        assert_eq!(a.clip_view, b.clip_view);
    }

    #[test]
    fn tensors_layout() {
        let s = sample(4, Label::Fake);
        let t = images_to_tensor(&[&s.image], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 4]);
        let v = t.get(0).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(v[0][1], 0.25);
        let m = masks_to_tensor(&[&s.mask], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.sum_all().unwrap().to_scalar::<f32>().unwrap(), 8.0);
    }
}
