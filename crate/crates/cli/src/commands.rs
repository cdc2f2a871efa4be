use std::fs;
use std::path::{Component, Path, PathBuf};

use anyhow::Context;
use maskclip_core::data::{load_manifest, make_fixtures};
use maskclip_core::engine::{predict, META_FILE, PARAMS_FILE};
use maskclip_core::evaluation::{evaluate, ImageRecord};
use maskclip_core::robustness::{sweep, SWEEP_METRICS};
use maskclip_core::{Device, Manifest, MetricReport, ModelState, Prediction, SweepResult, TrainLog};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::plot::line_chart;

/// The output directory; all writes go through [`OutDir::file`], which only
/// accepts relative paths without `..`.
#[derive(Clone, Debug)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> CliResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute target for `rel`, with its parent directory created.
    pub fn file(&self, rel: &str) -> CliResult<PathBuf> {
        let p = Path::new(rel);
        if !p.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(CliError::Usage(format!("output name {rel:?} must stay inside the output directory")));
        }
        let full = self.root.join(p);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(full)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.file(rel)?;
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

fn json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v).context("serializing JSON")?)
}

/// Loads a checkpoint directory, distinguishing "not there" from "broken".
pub fn load_checkpoint(dir: &Path) -> CliResult<ModelState> {
    if !dir.join(META_FILE).is_file() || !dir.join(PARAMS_FILE).is_file() {
        return Err(CliError::MissingCheckpoint(dir.display().to_string()));
    }
    Ok(ModelState::load(dir, &Device::Cpu)?)
}

fn manifest_for_eval(cfg: &RunConfig, path: Option<&Path>) -> CliResult<Manifest> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.data.eval_manifest));
    let m = load_manifest(&path)?;
    Ok(match cfg.eval_split()? {
        Some(split) => m.split(split),
        None => m,
    })
}

pub fn cmd_fixtures(out: &OutDir, n: usize, size: u32, seed: u64) -> CliResult<Manifest> {
    let m = make_fixtures(out.root(), n, size, &mut ChaCha8Rng::seed_from_u64(seed))?;
    log::info!("wrote {} fixtures to {}", m.len(), out.root().display());
    Ok(m)
}

/// Trains from scratch; writes `config.toml`, `train_log.json`,
/// `train_log.csv` and `checkpoints/`.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainLog> {
    let out = OutDir::new(cfg.out_dir())?;
    out.write("config.toml", cfg.to_toml()?)?;
    let manifest = load_manifest(Path::new(&cfg.data.train_manifest))?;
    let (_, log) = maskclip_core::engine::train(&manifest, &cfg.setup(), cfg.dtype()?, &Device::Cpu, Some(out.root()))?;
    out.write("train_log.json", json(&log)?)?;
    let mut csv = String::from("step,epoch,total,ce,bce,edg\n");
    for s in &log.steps {
        let l = &s.loss;
        csv.push_str(&format!("{},{},{:.8},{:.8},{:.8},{:.8}\n", s.step, s.epoch, l.total, l.ce, l.bce, l.edg));
    }
    out.write("train_log.csv", csv)?;
    Ok(log)
}

/// Writes `metrics.csv`, `metrics.json` and `predictions.jsonl`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, manifest: Option<&Path>) -> CliResult<MetricReport> {
    let state = load_checkpoint(checkpoint)?;
    let out = OutDir::new(cfg.out_dir())?;
    let m = manifest_for_eval(cfg, manifest)?;
    let (report, records) = evaluate(&state, &m, &cfg.evaluation, None)?;
    report.write(&out.file("metrics.csv")?, &out.file("metrics.json")?)?;
    let lines: Vec<String> = records
        .iter()
        .map(|r: &ImageRecord| serde_json::to_string(r).context("serializing record"))
        .collect::<anyhow::Result<_>>()?;
    out.write("predictions.jsonl", lines.join("\n") + "\n")?;
    Ok(report)
}

/// Prints `p_fake` with four decimals and writes `<name>_mask.png` (binary,
/// 0/255) and `<name>_prob.png` (sigmoid probability, 0..255).
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, image: &Path, name: Option<&str>) -> CliResult<Prediction> {
    let state = load_checkpoint(checkpoint)?;
    let out = OutDir::new(cfg.out_dir())?;
    let img = maskclip_core::data::load_image(image)?;
    let pred = predict(&state, &img)?;
    let stem = match name {
        Some(n) => n.to_string(),
        None => image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "prediction".into()),
    };
    let mask = out.file(&format!("{stem}_mask.png"))?;
    maskclip_core::data::write_mask(&mask, &pred.mask_binary(cfg.evaluation.threshold))?;
    let prob = out.file(&format!("{stem}_prob.png"))?;
    pred.probability_map()
        .save(&prob)
        .with_context(|| format!("writing {}", prob.display()))?;
    println!("{}", format_probability(pred.p_fake));
    Ok(pred)
}

pub fn format_probability(p: f64) -> String {
    format!("{:.4}", p.clamp(0.0, 1.0))
}

/// Writes `robustness.csv`, `robustness.json` and `plots/<kind>_<metric>.png`.
pub fn cmd_sweep(cfg: &RunConfig, checkpoint: &Path) -> CliResult<SweepResult> {
    let state = load_checkpoint(checkpoint)?;
    let out = OutDir::new(cfg.out_dir())?;
    let specs = cfg.degradation_specs();
    if specs.is_empty() {
        return Err(CliError::InvalidConfig("robustness sweep has no levels".into()));
    }
    let m = manifest_for_eval(cfg, None)?;
    let res = sweep(&state, &m, &specs, &cfg.evaluation)?;
    out.write("robustness.csv", res.to_csv())?;
    out.write("robustness.json", json(&res)?)?;
    for spec in &specs {
        for metric in SWEEP_METRICS {
            let path = out.file(&format!("plots/{}_{metric}.png", spec.kind.name()))?;
            line_chart(&path, &res.curve(spec.kind, metric))?;
        }
    }
    Ok(res)
}
