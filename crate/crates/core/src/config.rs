//! Versioned TOML configuration. Every section has defaults, so a file only
//! needs the keys it changes plus `format_version`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::StftParams;
use crate::error::{AsdError, Result};
use crate::eval::BenchmarkSpec;
use crate::geometry::{ArrayGeometry, Panorama};
use crate::model::{ModelConfig, TrainConfig};
use crate::streaming::StreamingConfig;
use crate::visual::{BoxAdjust, PatchAugment};

pub const FORMAT_VERSION: u32 = 1;

/// Signal front ends shared by training, streaming and the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub audio_window_ms: u32,
    pub stft: StftParams,
    pub eps: f64,
    pub geometry: ArrayGeometry,
    pub panorama: Panorama,
    pub tick_rate: f64,
    pub patch_height: usize,
    pub patch_width: usize,
    pub stack_depth: usize,
    pub box_adjust: BoxAdjust,
    pub patch_augment: PatchAugment,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            audio_window_ms: 300,
            stft: StftParams::default(),
            eps: crate::audio::DEFAULT_EPS,
            geometry: ArrayGeometry::default(),
            panorama: Panorama::default(),
            tick_rate: 7.5,
            patch_height: 120,
            patch_width: 192,
            stack_depth: 3,
            box_adjust: BoxAdjust::default(),
            patch_augment: PatchAugment::default(),
        }
    }
}

impl FrontendConfig {
    pub fn audio_samples(&self) -> usize {
        (self.sample_rate as u64 * self.audio_window_ms as u64 / 1000) as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.stft.validate()?;
        self.stft.frames(self.audio_samples())?;
        if self.patch_height == 0 || self.patch_width == 0 || self.stack_depth == 0 || !(self.tick_rate > 0.0) || !(self.eps > 0.0) {
            return Err(AsdError::input("invalid frontend configuration"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub format_version: u32,
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub streaming: StreamingConfig,
    pub benchmark: BenchmarkSpec,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            streaming: StreamingConfig::default(),
            benchmark: BenchmarkSpec::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(text)?;
        match raw.get("format_version").and_then(toml::Value::as_integer) {
            Some(v) if v == FORMAT_VERSION as i64 => {}
            Some(v) => return Err(AsdError::format(format!("unsupported config format_version {v}"))),
            None => return Err(AsdError::format("config is missing format_version")),
        }
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.model.validate(&self.frontend)?;
        self.train.validate()?;
        self.streaming.validate()?;
        self.benchmark.validate()
    }
}
