//! Runtime configuration, loadable from TOML with full defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable consulted when no `--config` flag is given.
pub const CONFIG_ENV_VAR: &str = "COPONERF_CONFIG";

/// All tunables of the pipeline. Every field has a default, so an empty TOML
/// file (or no file at all) yields a runnable configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Square input image side in pixels.
    pub image_size: usize,
    /// Feature channels per pyramid level, coarse to fine.
    pub channels: Vec<usize>,
    /// Number of pyramid levels.
    pub levels: usize,
    /// Cyclic-consistency threshold in pixels at feature resolution.
    pub cyclic_tau: f64,
    /// Depth samples per ray.
    pub depth_samples: usize,
    /// Rays per rendering batch.
    pub rays_per_batch: usize,
    /// Near plane in meters.
    pub near: f64,
    /// Far plane in meters.
    pub far: f64,
    /// Weight of the triplet loss in the total objective.
    pub lambda_tri: f64,
    /// Huber transition point for the triplet residuals, in pixels.
    pub huber_delta: f64,
    /// Matching-distribution softmax temperature; 0 means `1/sqrt(channels)`.
    pub softmax_temperature: f64,
    /// Overlap below this is Small.
    pub overlap_small: f64,
    /// Overlap above this is Large.
    pub overlap_large: f64,
    /// Aggregate/condition rounds in the matching module.
    pub interleave_rounds: usize,
    /// Substitute the ground-truth relative pose when rendering.
    pub teacher_forcing: bool,
    /// Seed for every stochastic choice (weights, sampling, scenes).
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_size: 256,
            channels: vec![128, 96, 64],
            levels: 3,
            cyclic_tau: 2.0,
            depth_samples: 64,
            rays_per_batch: 192,
            near: 0.1,
            far: 20.0,
            lambda_tri: 0.01,
            huber_delta: 1.0,
            softmax_temperature: 0.0,
            overlap_small: 0.5,
            overlap_large: 0.75,
            interleave_rounds: 2,
            teacher_forcing: true,
            seed: 0,
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    /// Resolution order: explicit path, then the environment variable, then
    /// built-in defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::from_path(p);
        }
        if let Ok(p) = std::env::var(CONFIG_ENV_VAR) {
            if !p.is_empty() {
                return Self::from_path(Path::new(&p));
            }
        }
        Ok(Config::default())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::InvalidConfig("image_size must be at least 16".into()));
        }
        if self.levels == 0 || self.levels != self.channels.len() {
            return Err(Error::InvalidConfig(format!(
                "levels ({}) must match the number of channel entries ({})",
                self.levels,
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.depth_samples == 0 || self.rays_per_batch == 0 {
            return Err(Error::InvalidConfig(
                "depth_samples and rays_per_batch must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_small)
            || !(0.0..=1.0).contains(&self.overlap_large)
            || self.overlap_small > self.overlap_large
        {
            return Err(Error::InvalidConfig(format!(
                "overlap thresholds must satisfy 0 <= small <= large <= 1, got {} and {}",
                self.overlap_small, self.overlap_large
            )));
        }
        if self.lambda_tri < 0.0 || self.huber_delta <= 0.0 {
            return Err(Error::InvalidConfig(
                "lambda_tri must be >= 0 and huber_delta > 0".into(),
            ));
        }
        if self.softmax_temperature < 0.0 {
            return Err(Error::InvalidConfig("softmax_temperature must be >= 0".into()));
        }
        if self.interleave_rounds == 0 {
            return Err(Error::InvalidConfig("interleave_rounds must be positive".into()));
        }
        Ok(())
    }

    /// Effective softmax temperature for a channel count.
    pub fn temperature_for(&self, channels: usize) -> f64 {
        if self.softmax_temperature > 0.0 {
            self.softmax_temperature
        } else {
            1.0 / (channels as f64).sqrt()
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
