//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.
//! Runs without the libtest harness so the lines are never captured:
//! `cargo test -p maskclip-cli --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use maskclip_cli::{cmd_eval, cmd_fixtures, cmd_sweep, cmd_train, resolve, OutDir, Override, RunConfig};
use maskclip_core::candle_core::Var;
use maskclip_core::data::{images_to_tensor, load_manifest, masks_to_tensor, resize_rgb};
use maskclip_core::engine::{predict, prepare, predict_prepared, train};
use maskclip_core::evaluation::{evaluate, pixel_metrics, Confusion};
use maskclip_core::gradcheck::suite;
use maskclip_core::objective::{combined_loss, edge_weight_map, Targets};
use maskclip_core::robustness::{degrade, sweep, DegradationKind};
use maskclip_core::{DType, DegradationSpec, Device, EvalConfig, ModelState, Result as CoreResult, Setup, Tensor};
use maskclip_core::image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Report {
    results: Vec<(String, bool)>,
}

impl Report {
    fn record(&mut self, name: &str, ok: bool, detail: String) {
        println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), ok));
    }

    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<(bool, String), String>) {
        match f() {
            Ok((ok, detail)) => self.record(name, ok, detail),
            Err(e) => self.record(name, false, format!("error: {e}")),
        }
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn config(out: &Path, manifest: &Path, extra: &[&str]) -> Result<RunConfig, String> {
    let mut ov = vec![
        Override::parse("preset=toy").map_err(e)?,
        Override::parse(&format!("out={}", out.display())).map_err(e)?,
        Override::parse(&format!("data.train_manifest={}", manifest.display())).map_err(e)?,
        Override::parse(&format!("data.eval_manifest={}", manifest.display())).map_err(e)?,
    ];
    for s in extra {
        ov.push(Override::parse(s).map_err(e)?);
    }
    resolve(None, &ov).map_err(e)
}

/// SHA-256 over sorted relative paths and file bytes.
fn dir_digest(root: &Path) -> String {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut files = BTreeMap::new();
    walk(root, root, &mut files);
    let mut h = Sha256::new();
    for (k, v) in files {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(&v);
    }
    hex::encode(h.finalize())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, size: u32) -> image::Rgb32FImage {
    image::Rgb32FImage::from_fn(size, size, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut report = Report { results: Vec::new() };

    let data_dir = root.join("fixtures");
    let manifest_path = data_dir.join("manifest.jsonl");
    cmd_fixtures(&OutDir::new(&data_dir).unwrap(), 16, 64, 7).unwrap();

    report.run("gradient suite", || {
        let t = Instant::now();
        let results = suite().map_err(e)?;
        let secs = t.elapsed().as_secs_f64();
        let worst = results.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);
        let parts: Vec<String> = results.iter().map(|(n, r)| format!("{n} {:.1e}", r.max_rel_error())).collect();
        let ok = results.len() == 6 && worst < 1e-4 && secs < 60.0;
        Ok((ok, format!("max rel err {worst:.2e} < 1e-4 [{}], {secs:.1}s < 60s", parts.join(", "))))
    });

    let overfit_out = root.join("overfit");
    let overfit_ckpt = overfit_out.join("checkpoints").join("last");
    report.run("overfit fixture", || {
        let cfg = config(&overfit_out, &manifest_path, &[])?;
        let t = Instant::now();
        let log = cmd_train(&cfg).map_err(e)?;
        let secs = t.elapsed().as_secs_f64();
        let steps = log.steps.len();
        cmd_eval(&cfg, &overfit_ckpt, None).map_err(e)?;
        let csv = std::fs::read_to_string(overfit_out.join("metrics.csv")).map_err(e)?;
        let avg: Vec<&str> = csv.lines().find(|l| l.starts_with("AVG,")).ok_or("no AVG row")?.split(',').collect();
        let f1: f64 = avg[3].parse().map_err(e)?;
        let acc: f64 = avg[5].parse().map_err(e)?;
        let ok = f1 >= 0.95 && acc == 1.0 && steps <= 300 && secs < 300.0;
        Ok((ok, format!("pixel F1 {f1:.4} >= 0.95, image acc {acc:.4} == 1, {steps} steps <= 300, train {secs:.1}s < 300s")))
    });

    report.run("metric oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let mut worst_identity = 0.0f64;
        let mut mismatches = 0;
        for _ in 0..200 {
            let density: f64 = rng.random();
            let pred: Vec<u8> = (0..256).map(|_| u8::from(rng.random_bool(density))).collect();
            let gt: Vec<u8> = (0..256).map(|_| u8::from(rng.random_bool(1.0 - density))).collect();
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for i in 0..256 {
                match (pred[i], gt[i]) {
                    (1, 1) => tp += 1,
                    (1, 0) => fp += 1,
                    (0, 1) => fn_ += 1,
                    _ => {}
                }
            }
            let c = Confusion::count(&pred, &gt).map_err(e)?;
            let (f1, iou) = pixel_metrics(&pred, &gt).map_err(e)?;
            let denom = (tp + fp + fn_) as f64;
            let (bf1, biou) = if denom == 0.0 {
                (1.0, 1.0)
            } else {
                (2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, tp as f64 / denom)
            };
            if (c.tp, c.fp, c.fn_) != (tp, fp, fn_) || f1 != bf1 || iou != biou {
                mismatches += 1;
            }
            worst_identity = worst_identity.max((f1 - 2.0 * iou / (1.0 + iou)).abs());
        }
        Ok((mismatches == 0 && worst_identity < 1e-9, format!("{mismatches}/200 mismatches vs brute force, max |f1 - 2iou/(1+iou)| = {worst_identity:.1e} < 1e-9")))
    });

    report.run("frozen invariance", || {
        let out = root.join("frozen");
        let cfg = config(&out, &manifest_path, &["training.max_steps=10", "training.epochs=10"])?;
        let before = ModelState::init(&cfg.setup(), cfg.dtype().map_err(e)?, &Device::Cpu).map_err(e)?.frozen_digest().map_err(e)?;
        let log = cmd_train(&cfg).map_err(e)?;
        let after = ModelState::load(&out.join("checkpoints").join("last"), &Device::Cpu).map_err(e)?;
        let digest = after.frozen_digest().map_err(e)?;
        let ok = digest == before && log.steps.len() == 10;
        Ok((ok, format!("{} steps, digest {}… before / {}… after", log.steps.len(), &before[..12], &digest[..12])))
    });

    report.run("residual identity", || {
        let setup = Setup::toy();
        let state = ModelState::init(&setup, DType::F64, &Device::Cpu).map_err(e)?;
        let model = &state.model;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut worst = 0.0f64;
        for _ in 0..10 {
            let img = random_image(&mut rng, 64);
            let clip = resize_rgb(&img, 32);
            let crop_t = images_to_tensor(&[&img], DType::F64, &Device::Cpu).map_err(e)?;
            let clip_t = images_to_tensor(&[&clip], DType::F64, &Device::Cpu).map_err(e)?;
            let fused = model.spm.run_fusion_plan(&model.encoders, &crop_t, &clip_t).map_err(e)?;
            let plain = model.encoders.spatial.forward(&crop_t).map_err(e)?;
            let scale = plain.abs().map_err(e)?.max_all().map_err(e)?.to_scalar::<f64>().map_err(e)?;
            worst = worst.max(max_abs_diff(&fused.spatial_tokens, &plain) / scale);
        }
        Ok((worst <= 1e-6, format!("max relative deviation {worst:.1e} <= 1e-6 over 10 inputs")))
    });

    report.run("loss-weight grid", || {
        let manifest = load_manifest(&manifest_path).map_err(e)?;
        let mut parts = Vec::new();
        let mut ok = true;
        for (ce, bce, edg) in [(1.0, 2.0, 1.0), (2.0, 1.0, 1.0), (1.0, 1.0, 0.0), (1.0, 1.0, 1.0)] {
            let mut setup = Setup::toy();
            setup.loss.w_ce = ce;
            setup.loss.w_bce = bce;
            setup.loss.w_edg = edg;
            setup.train.max_steps = 20;
            setup.train.epochs = 20;
            match train(&manifest, &setup, DType::F32, &Device::Cpu, None) {
                Ok((_, log)) => {
                    let finite = log.steps.iter().all(|s| s.loss.total.is_finite());
                    ok &= finite && log.steps.len() == 20;
                    parts.push(format!("({ce},{bce},{edg}) {} steps final {:.4}", log.steps.len(), log.steps.last().map_or(f64::NAN, |s| s.loss.total)));
                }
                Err(err) => {
                    ok = false;
                    parts.push(format!("({ce},{bce},{edg}) error {err}"));
                }
            }
        }
        // Gradient reaching the mask logits through the edge term at w_edg = 0.
        let mut setup = Setup::toy();
        setup.loss.w_edg = 0.0;
        let state = ModelState::init(&setup, DType::F64, &Device::Cpu).map_err(e)?;
        let samples: Vec<_> = (0..manifest.len()).map(|i| manifest.load_sample(i)).collect::<CoreResult<_>>().map_err(e)?;
        let crops: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let clip_imgs: Vec<_> = samples.iter().map(|s| resize_rgb(&s.image, 32)).collect();
        let clips: Vec<_> = clip_imgs.iter().collect();
        let fwd = state
            .model
            .forward(
                &images_to_tensor(&crops, DType::F64, &Device::Cpu).map_err(e)?,
                &images_to_tensor(&clips, DType::F64, &Device::Cpu).map_err(e)?,
            )
            .map_err(e)?;
        let logits = Var::from_tensor(&fwd.masks.fake.detach()).map_err(e)?;
        let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
        let weights: Vec<f64> = samples.iter().flat_map(|s| edge_weight_map(&s.mask, setup.loss.edge_radius, setup.loss.edge_gain)).collect();
        let labels: Vec<f64> = samples.iter().flat_map(|s| if s.label.is_fake() { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
        let targets = Targets {
            masks: masks_to_tensor(&masks, DType::F64, &Device::Cpu).map_err(e)?,
            edge_weights: Tensor::from_vec(weights, (samples.len(), 64, 64), &Device::Cpu).map_err(e)?,
            labels: Tensor::from_vec(labels, (samples.len(), 2), &Device::Cpu).map_err(e)?,
        };
        let terms = combined_loss(logits.as_tensor(), fwd.g(), fwd.text(), &targets, &setup.loss).map_err(e)?;
        let grads = (&terms.edg * setup.loss.w_edg).map_err(e)?.backward().map_err(e)?;
        let edge_grad = match grads.get(logits.as_tensor()) {
            Some(g) => g.abs().map_err(e)?.max_all().map_err(e)?.to_scalar::<f64>().map_err(e)?,
            None => 0.0,
        };
        let grad_of = |t: &Tensor| -> CoreResult<Tensor> {
            let g = t.backward()?;
            Ok(g.get(logits.as_tensor()).cloned().unwrap_or(logits.as_tensor().zeros_like()?))
        };
        let without_edge = ((&terms.ce * setup.loss.w_ce).map_err(e)? + (&terms.bce * setup.loss.w_bce).map_err(e)?).map_err(e)?;
        let total_gap = max_abs_diff(&grad_of(&terms.total).map_err(e)?, &grad_of(&without_edge).map_err(e)?);
        ok &= edge_grad == 0.0 && total_gap == 0.0;
        Ok((ok, format!("{}; (1,1,0) edge-path gradient max |g| = {edge_grad}, total vs ce+bce gradient gap = {total_gap}", parts.join(", "))))
    });

    report.run("robustness protocol", || {
        let blur = DegradationSpec::blur().levels;
        let jpeg = DegradationSpec::jpeg().levels;
        let mut ok = blur == (3..=23).step_by(2).collect::<Vec<u32>>() && jpeg == vec![100, 90, 80, 70, 60];
        let state = ModelState::load(&overfit_ckpt, &Device::Cpu).map_err(e)?;
        let manifest = load_manifest(&manifest_path).map_err(e)?;
        let cfg = EvalConfig::default();
        let (clean, _) = evaluate(&state, &manifest, &cfg, None).map_err(e)?;
        let ident = sweep(
            &state,
            &manifest,
            &[DegradationSpec {
                kind: DegradationKind::GaussianBlur,
                levels: vec![1],
            }],
            &cfg,
        )
        .map_err(e)?;
        let mut worst = 0.0f64;
        for (a, b) in ident.points[0].report.rows().zip(clean.rows()) {
            let pairs = [(a.pixel_iou, b.pixel_iou), (a.pixel_f1, b.pixel_f1), (Some(a.image_f1), Some(b.image_f1)), (Some(a.image_acc), Some(b.image_acc))];
            for (x, y) in pairs {
                match (x, y) {
                    (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                    (None, None) => {}
                    _ => worst = f64::INFINITY,
                }
            }
        }
        ok &= worst <= 1e-9;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 64);
        let mut dims_ok = true;
        for (kind, levels) in [(DegradationKind::GaussianBlur, &blur), (DegradationKind::Jpeg, &jpeg)] {
            for &l in levels {
                dims_ok &= degrade(&img, kind, l).map_err(e)?.dimensions() == (64, 64);
                let (crop, clip) = prepare(&state, &img, Some((kind, l))).map_err(e)?;
                dims_ok &= crop.dimensions() == (64, 64) && clip.dimensions() == (32, 32);
            }
        }
        ok &= dims_ok;
        let sweep_cfg = config(&root.join("sweep"), &manifest_path, &[])?;
        let res = cmd_sweep(&sweep_cfg, &overfit_ckpt).map_err(e)?;
        let levels: Vec<(DegradationKind, u32)> = res.points.iter().map(|p| (p.kind, p.level)).collect();
        let expected: Vec<(DegradationKind, u32)> = blur
            .iter()
            .map(|&l| (DegradationKind::GaussianBlur, l))
            .chain(jpeg.iter().map(|&l| (DegradationKind::Jpeg, l)))
            .collect();
        ok &= levels == expected;
        let plots = std::fs::read_dir(root.join("sweep").join("plots")).map_err(e)?.count();
        ok &= plots == 8;
        Ok((
            ok,
            format!("blur {blur:?}, jpeg {jpeg:?}; identity level deviation {worst:.1e} <= 1e-9; dimensions kept: {dims_ok}; swept {} levels, {plots} plots", levels.len()),
        ))
    });

    report.run("determinism", || {
        let mut losses = Vec::new();
        for run in ["det_a", "det_b"] {
            let cfg = config(&root.join(run), &manifest_path, &["training.epochs=1"])?;
            let log = cmd_train(&cfg).map_err(e)?;
            losses.push(log.epochs.first().ok_or("no epoch logged")?.mean.total);
        }
        let mut digests = Vec::new();
        for run in ["fx_a", "fx_b"] {
            let dir = root.join(run);
            cmd_fixtures(&OutDir::new(&dir).map_err(e)?, 16, 64, 7).map_err(e)?;
            digests.push(dir_digest(&dir));
        }
        let d = (losses[0] - losses[1]).abs();
        let ok = d <= 1e-6 && digests[0] == digests[1];
        Ok((ok, format!("epoch-1 mean loss {:.8} vs {:.8} (|Δ| = {d:.1e} <= 1e-6); fixture digests equal: {}", losses[0], losses[1], digests[0] == digests[1])))
    });

    report.run("checkpoint roundtrip", || {
        let manifest = load_manifest(&manifest_path).map_err(e)?;
        let mut setup = Setup::toy();
        setup.train.max_steps = 3;
        setup.train.epochs = 3;
        let out = root.join("roundtrip");
        let (state, _) = train(&manifest, &setup, DType::F64, &Device::Cpu, Some(&out)).map_err(e)?;
        let loaded = ModelState::load(&out.join("checkpoints").join("last"), &Device::Cpu).map_err(e)?;
        let probe: Vec<_> = (0..4).map(|i| manifest.load_sample(i).map(|s| s.image)).collect::<CoreResult<_>>().map_err(e)?;
        let views: Vec<_> = probe.iter().map(|img| prepare(&state, img, None)).collect::<CoreResult<_>>().map_err(e)?;
        let crops: Vec<_> = views.iter().map(|v| &v.0).collect();
        let clips: Vec<_> = views.iter().map(|v| &v.1).collect();
        let a = predict_prepared(&state, &crops, &clips).map_err(e)?;
        let b = predict_prepared(&loaded, &crops, &clips).map_err(e)?;
        let mut worst = 0.0f64;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x.p_fake - y.p_fake).abs());
            for (u, v) in x.mask_logits.iter().zip(&y.mask_logits) {
                worst = worst.max((u - v).abs());
            }
        }
        let single = (predict(&state, &probe[0]).map_err(e)?.p_fake - predict(&loaded, &probe[0]).map_err(e)?.p_fake).abs();
        worst = worst.max(single);
        Ok((worst <= 1e-12 && loaded.step() == 3, format!("max |Δ| over p_fake and mask logits of 4 probes = {worst:.1e} <= 1e-12")))
    });

    let failed: Vec<&str> = report.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!("acceptance: {}/{} criteria passed", report.results.len() - failed.len(), report.results.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
