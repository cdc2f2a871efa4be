//! Run configuration: a TOML key tree merged over built-in presets.
//!
//! Resolution order, lowest to highest: preset defaults, config file, command
//! line (`--set key=value`, `--seed`, `--out`). Every key in a file or
//! override must already exist in the preset tree; values are type-checked
//! when the merged tree is deserialized.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use maskclip_core::robustness::DegradationKind;
use maskclip_core::{AugmentationConfig, DegradationSpec, EvalConfig, LossConfig, ModelConfig, Setup, Split, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: String,
    pub eval_manifest: String,
    /// `train`, `test` or `all`.
    pub eval_split: String,
    pub augmentation: AugmentationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    pub blur_levels: Vec<u32>,
    pub jpeg_levels: Vec<u32>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            blur_levels: DegradationSpec::blur().levels,
            jpeg_levels: DegradationSpec::jpeg().levels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `default` (full-size encoders) or `toy`; selects the base tree.
    pub preset: String,
    pub seed: u64,
    /// Output directory; every artifact is written below it.
    pub out: String,
    /// `f32` or `f64`.
    pub dtype: String,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub evaluation: EvalConfig,
    pub robustness: RobustnessConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> CliResult<Self> {
        let setup = match name {
            "default" => Setup::default(),
            "toy" => Setup::toy(),
            other => return Err(CliError::InvalidConfig(format!("unknown preset {other:?} (expected default or toy)"))),
        };
        Ok(Self {
            preset: name.into(),
            seed: setup.seed,
            out: format!("runs/{name}"),
            dtype: "f32".into(),
            model: setup.model,
            losses: setup.loss,
            training: setup.train,
            data: DataConfig {
                train_manifest: "data/manifest.jsonl".into(),
                eval_manifest: "data/manifest.jsonl".into(),
                eval_split: if name == "toy" { "all" } else { "test" }.into(),
                augmentation: setup.augmentation,
            },
            evaluation: EvalConfig::default(),
            robustness: RobustnessConfig::default(),
        })
    }

    pub fn setup(&self) -> Setup {
        Setup {
            model: self.model.clone(),
            loss: self.losses.clone(),
            train: self.training.clone(),
            augmentation: self.data.augmentation.clone(),
            seed: self.seed,
        }
    }

    pub fn dtype(&self) -> CliResult<maskclip_core::DType> {
        match self.dtype.as_str() {
            "f32" => Ok(maskclip_core::DType::F32),
            "f64" => Ok(maskclip_core::DType::F64),
            other => Err(CliError::InvalidConfig(format!("dtype must be f32 or f64, got {other:?}"))),
        }
    }

    /// `None` means every split.
    pub fn eval_split(&self) -> CliResult<Option<Split>> {
        match self.data.eval_split.as_str() {
            "all" => Ok(None),
            "train" => Ok(Some(Split::Train)),
            "test" => Ok(Some(Split::Test)),
            other => Err(CliError::InvalidConfig(format!("data.eval_split must be train, test or all, got {other:?}"))),
        }
    }

    pub fn degradation_specs(&self) -> Vec<DegradationSpec> {
        let mut specs = Vec::new();
        for (kind, levels) in [
            (DegradationKind::GaussianBlur, &self.robustness.blur_levels),
            (DegradationKind::Jpeg, &self.robustness.jpeg_levels),
        ] {
            if !levels.is_empty() {
                specs.push(DegradationSpec {
                    kind,
                    levels: levels.clone(),
                });
            }
        }
        specs
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.dtype()?;
        self.eval_split()?;
        if self.out.is_empty() {
            return Err(CliError::InvalidConfig("out must not be empty".into()));
        }
        self.setup().validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        self.evaluation_check()?;
        for s in self.degradation_specs() {
            s.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    fn evaluation_check(&self) -> CliResult<()> {
        let t = self.evaluation.threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::InvalidConfig(format!("evaluation.threshold {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(e.into()))
    }
}

/// One `key=value` assignment from the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    /// Parses `a.b.c=value`. The value is read as a TOML literal when possible
    /// (`3`, `1e-4`, `true`, `[1, 2]`, `"x"`) and as a bare string otherwise.
    pub fn parse(s: &str) -> CliResult<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {s:?} is not key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(CliError::Usage(format!("malformed override key {key:?}")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Self {
            key: key.to_string(),
            value,
        })
    }
}

/// Rejects the same key set to two different values, and a key set alongside
/// one of its own sub-keys.
fn check_conflicts(overrides: &[Override]) -> CliResult<()> {
    let mut seen: BTreeMap<&str, &Value> = BTreeMap::new();
    for o in overrides {
        if let Some(prev) = seen.get(o.key.as_str()) {
            if *prev != &o.value {
                return Err(CliError::ConflictingOverrides(format!("{} set to both {} and {}", o.key, prev, o.value)));
            }
        }
        seen.insert(&o.key, &o.value);
    }
    let keys: Vec<&str> = seen.keys().copied().collect();
    for a in &keys {
        for b in &keys {
            if b.len() > a.len() && b.starts_with(a) && b.as_bytes()[a.len()] == b'.' {
                return Err(CliError::ConflictingOverrides(format!("{a} and {b} both set")));
            }
        }
    }
    Ok(())
}

/// Integers are accepted where the base tree holds floats.
fn coerce(base: &Value, v: Value) -> Value {
    match (base, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    }
}

/// Merges `over` into `base` recursively; keys absent from `base` are errors.
fn merge(base: &mut Table, over: Table, prefix: &str) -> CliResult<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = base.get_mut(&k) else {
            return Err(CliError::UnknownKey(path));
        };
        match (slot, v) {
            (Value::Table(b), Value::Table(o)) => merge(b, o, &path)?,
            (slot, v) => *slot = coerce(slot, v),
        }
    }
    Ok(())
}

fn set_path(tree: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let slot = node.get_mut(*part).ok_or_else(|| CliError::UnknownKey(key.to_string()))?;
        if last {
            if let (Value::Table(b), Value::Table(o)) = (&mut *slot, &value) {
                return merge(b, o.clone(), key);
            }
            *slot = coerce(slot, value);
            return Ok(());
        }
        node = match slot {
            Value::Table(t) => t,
            _ => return Err(CliError::UnknownKey(key.to_string())),
        };
    }
    Ok(())
}

fn read_file(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Resolves the effective configuration from an optional file and the
/// command-line overrides (already including `--seed` / `--out`).
pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> CliResult<RunConfig> {
    check_conflicts(overrides)?;
    let file_tree = file.map(read_file).transpose()?.unwrap_or_default();
    let preset = overrides
        .iter()
        .find(|o| o.key == "preset")
        .map(|o| o.value.clone())
        .or_else(|| file_tree.get("preset").cloned());
    let preset = match preset {
        None => "default".to_string(),
        Some(Value::String(s)) => s,
        Some(other) => return Err(CliError::InvalidConfig(format!("preset must be a string, got {other}"))),
    };
    let base = RunConfig::preset(&preset)?;
    let mut tree = match Value::try_from(&base).map_err(|e| CliError::Runtime(e.into()))? {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    };
    merge(&mut tree, file_tree, "")?;
    for o in overrides {
        set_path(&mut tree, &o.key, o.value.clone())?;
    }
    let cfg: RunConfig = Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::InvalidConfig(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(s: &str) -> Override {
        Override::parse(s).unwrap()
    }

    #[test]
    fn override_values_are_typed() {
        assert_eq!(ov("a=3").value, Value::Integer(3));
        assert_eq!(ov("a=1e-4").value, Value::Float(1e-4));
        assert_eq!(ov("a=true").value, Value::Boolean(true));
        assert_eq!(ov("a=runs/x").value, Value::String("runs/x".into()));
        assert_eq!(ov("a.b = [1, 2]").value, Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert!(matches!(Override::parse("novalue"), Err(CliError::Usage(_))));
        assert!(matches!(Override::parse("a..b=1"), Err(CliError::Usage(_))));
    }

    #[test]
    fn defaults_roundtrip_through_toml() {
        for p in ["default", "toy"] {
            let cfg = RunConfig::preset(p).unwrap();
            let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(resolve(None, &[ov("training.learning_rat=1")]), Err(CliError::UnknownKey(k)) if k == "training.learning_rat"));
        assert!(matches!(resolve(None, &[ov("seed.x=1")]), Err(CliError::UnknownKey(_))));
    }

    #[test]
    fn conflicts_detected() {
        let r = resolve(None, &[ov("seed=1"), ov("seed=2")]);
        assert!(matches!(r, Err(CliError::ConflictingOverrides(_))));
        let r = resolve(None, &[ov("losses={w_ce = 2.0}"), ov("losses.w_ce=1")]);
        assert!(matches!(r, Err(CliError::ConflictingOverrides(_))));
        assert_eq!(resolve(None, &[ov("seed=3"), ov("seed=3")]).unwrap().seed, 3);
    }

    #[test]
    fn integer_accepted_for_float_key() {
        let cfg = resolve(None, &[ov("losses.w_bce=2")]).unwrap();
        assert_eq!(cfg.losses.w_bce, 2.0);
    }

    #[test]
    fn type_errors_are_invalid_config() {
        assert!(matches!(resolve(None, &[ov("training.batch_size=abc")]), Err(CliError::InvalidConfig(_))));
        assert!(matches!(resolve(None, &[ov("dtype=f16")]), Err(CliError::InvalidConfig(_))));
    }

    #[test]
    fn preset_selects_base_tree() {
        let cfg = resolve(None, &[ov("preset=toy")]).unwrap();
        assert_eq!(cfg.model, ModelConfig::toy());
        assert_eq!(cfg.seed, 7);
    }
}
