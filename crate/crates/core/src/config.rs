// SPDX-License-Identifier: Apache-2.0

//! Run configuration: a TOML file with one table per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::machine::{LayoutConfig, MitigationConfig, NoiseModel};
use crate::matcher::ChannelSet;
use crate::preprocess::PreprocessParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Built-in workload name; ignored when `module_path` is set.
    pub workload: String,
    /// Size knob of the workload; `None` means the workload's default.
    pub scale: Option<u32>,
    pub module_path: Option<PathBuf>,
    pub layout_seed: u64,
    /// Seeds noise, mitigation and randomized workloads.
    pub rng_seed: u64,
    pub step_limit: usize,
    /// `all` or a `+`-separated channel list.
    pub channels: String,
    /// Workload profiled to build the fingerprint database.
    pub profile_workload: String,
    pub profile_scale: Option<u32>,
    /// Compare exact opcodes instead of width-insensitive families.
    pub strict: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            workload: "aes_like".into(),
            scale: None,
            module_path: None,
            layout_seed: 1,
            rng_seed: 1,
            step_limit: 50_000_000,
            channels: "all".into(),
            profile_workload: "reference".into(),
            profile_scale: None,
            strict: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub layout: LayoutConfig,
    pub noise: NoiseModel,
    pub mitigation: MitigationConfig,
    pub preprocess: PreprocessParams,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::from_toml(&text).map_err(|msg| ConfigError::Parse {
            path: path.to_path_buf(),
            msg,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the run seed into the noise model.
    pub fn resolved(mut self) -> Self {
        self.noise.rng_seed = self.run.rng_seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.rng_seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.noise.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mitigation.validate().map_err(ConfigError::Invalid)?;
        self.channel_set()?;
        if self.run.step_limit == 0 {
            return Err(ConfigError::Invalid("step_limit must be positive".into()));
        }
        let p = &self.preprocess;
        for (v, name) in [
            (p.stack_coverage_target, "stack_coverage_target"),
            (p.stack_min_gain, "stack_min_gain"),
            (p.filter_min_share, "filter_min_share"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn channel_set(&self) -> Result<ChannelSet, ConfigError> {
        self.run
            .channels
            .parse()
            .map_err(|e: crate::matcher::ChannelError| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default().resolved());
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig::from_toml("[run]\nrng_seed = 9\n[noise]\nlatency_jitter_sigma = 120.0\n").unwrap();
        assert_eq!(c.noise.rng_seed, 9);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(c.hash(), RunConfig::default().resolved().hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[noise]\nsigma = 3\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.run.channels = "".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.mitigation.nop_insertion_prob = 2.0;
        assert!(c.validate().is_err());
    }
}
