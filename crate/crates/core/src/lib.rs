//! MaskCLIP: synthetic-image detection and manipulation localization with a
//! frozen CLIP backbone, a tunable MAE spatial encoder and the SPM fusion
//! blocks (prompt tuning, VSA, VCA, TVCA).

pub mod archive;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod nn;
pub mod objective;
pub mod params;
pub mod resize;
pub mod robustness;
pub mod spm;

pub use candle_core::{self, DType, Device, Tensor};
pub use image;
pub use data::{AugmentationConfig, ImageSample, Label, Manifest, ManifestEntry, Split};
pub use decoder::{Decoder, DecoderConfig};
pub use encoders::{EncoderKind, EncoderSpec, Encoders, TextEncoderSpec};
pub use engine::{Ablation, MaskClip, ModelConfig, ModelState, Prediction, Setup, TrainConfig, TrainLog};
pub use error::{Error, Result};
pub use evaluation::{EvalConfig, MetricReport};
pub use objective::{LossBreakdown, LossConfig};
pub use params::{Group, ParamStore};
pub use robustness::{DegradationKind, DegradationSpec, SweepResult};
pub use spm::FusionPlan;
