use std::path::Path;

use anyhow::{Context, Result};
use dyadmotion_core::synth::StyleParams;
use dyadmotion_models::{DiffusionConfig, EvalConfig, GuideConfig, LipConfig, RvqConfig};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with; every table and key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: DataConfig,
    pub lip: LipConfig,
    pub face: DiffusionConfig,
    pub rvq: RvqConfig,
    pub guide: GuideConfig,
    pub body: DiffusionConfig,
    pub vq_only: VqOnlyConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub takes: usize,
    pub duration_s: f64,
    pub style: StyleParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            takes: 10,
            duration_s: 60.0,
            style: StyleParams::default(),
        }
    }
}

/// The per-frame tokenizer and transformer of the VQ-only baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqOnlyConfig {
    pub rvq: RvqConfig,
    pub guide: GuideConfig,
}

impl Default for VqOnlyConfig {
    fn default() -> Self {
        Self {
            rvq: RvqConfig {
                stride: 1,
                ..RvqConfig::default()
            },
            guide: GuideConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub top_p: f64,
    pub guidance_scale: f64,
    /// Audio is cropped to this many seconds (0 keeps all of it).
    pub duration_s: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            guidance_scale: 2.0,
            duration_s: 20.0,
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
