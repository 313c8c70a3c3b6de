//! Run configuration file (TOML) and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::AEConfig;
use crate::condunet::UNetConfig;
use crate::datasets::Layout;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{} config violation(s):\n  {}", .0.len(), .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T", alias = "t", default = "defaults::t")]
    pub t: usize,
    #[serde(default = "defaults::beta_start")]
    pub beta_start: f64,
    #[serde(default = "defaults::beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t: defaults::t(),
            beta_start: defaults::beta_start(),
            beta_end: defaults::beta_end(),
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, crate::diffusion::DiffusionError> {
        make_schedule(self.t, self.beta_start, self.beta_end, self.kind)
    }
}

/// Autoencoder pretraining stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeTrainConfig {
    #[serde(default = "defaults::ae_steps")]
    pub steps: usize,
    #[serde(default = "defaults::ae_batch")]
    pub batch_size: usize,
    #[serde(default = "defaults::ae_lr")]
    pub learning_rate: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: defaults::ae_steps(),
            batch_size: defaults::ae_batch(),
            learning_rate: defaults::ae_lr(),
        }
    }
}

mod defaults {
    pub fn t() -> usize {
        1000
    }
    pub fn beta_start() -> f64 {
        1e-4
    }
    pub fn beta_end() -> f64 {
        0.02
    }
    pub fn ae_steps() -> usize {
        2000
    }
    pub fn ae_batch() -> usize {
        8
    }
    pub fn ae_lr() -> f64 {
        1e-3
    }
    pub fn image_size() -> usize {
        64
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn steps() -> usize {
        2000
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn ema_decay() -> f64 {
        0.999
    }
    pub fn seed() -> u64 {
        7
    }
    pub fn checkpoint_every() -> usize {
        500
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn layout() -> super::Layout {
        super::Layout::Paired
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub config_version: u32,
    pub data_root: PathBuf,
    #[serde(default = "defaults::layout")]
    pub layout: Layout,
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub ae: AEConfig,
    #[serde(default)]
    pub ae_train: AeTrainConfig,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

impl TrainConfig {
    /// Defaults everywhere except the data location.
    pub fn with_data_root(root: impl Into<PathBuf>) -> Self {
        Self {
            config_version: CONFIG_VERSION,
            data_root: root.into(),
            layout: defaults::layout(),
            image_size: defaults::image_size(),
            batch_size: defaults::batch_size(),
            steps: defaults::steps(),
            learning_rate: defaults::learning_rate(),
            ema_decay: defaults::ema_decay(),
            seed: defaults::seed(),
            checkpoint_every: defaults::checkpoint_every(),
            grad_clip: defaults::grad_clip(),
            ae: AEConfig::default(),
            ae_train: AeTrainConfig::default(),
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }

    /// Every violated constraint, including cross-field ones.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.config_version != CONFIG_VERSION {
            v.push(format!(
                "config_version: unsupported version {} (expected {CONFIG_VERSION})",
                self.config_version
            ));
        }
        if self.image_size < crate::maskpipe::MIN_SIDE {
            v.push(format!(
                "image_size: must be ≥ {} (got {})",
                crate::maskpipe::MIN_SIDE,
                self.image_size
            ));
        }
        if self.batch_size < 1 {
            v.push("batch_size: must be ≥ 1".into());
        }
        if self.steps < 1 {
            v.push("steps: must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!(
                "learning_rate: must be > 0 (got {})",
                self.learning_rate
            ));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            v.push(format!(
                "ema_decay: must lie in (0, 1) (got {})",
                self.ema_decay
            ));
        }
        if self.checkpoint_every < 1 {
            v.push("checkpoint_every: must be ≥ 1".into());
        }
        if !(self.grad_clip > 0.0) {
            v.push(format!("grad_clip: must be > 0 (got {})", self.grad_clip));
        }
        if self.ae_train.steps < 1 {
            v.push("ae_train.steps: must be ≥ 1".into());
        }
        if self.ae_train.batch_size < 1 {
            v.push("ae_train.batch_size: must be ≥ 1".into());
        }
        if !(self.ae_train.learning_rate > 0.0) {
            v.push(format!(
                "ae_train.learning_rate: must be > 0 (got {})",
                self.ae_train.learning_rate
            ));
        }
        v.extend(self.ae.violations());
        v.extend(self.unet.violations());
        if self.schedule.t < 1 {
            v.push("schedule.T: must be ≥ 1".into());
        }
        let (b0, b1) = (self.schedule.beta_start, self.schedule.beta_end);
        if !(b0 > 0.0 && b0 <= b1 && b1 < 1.0) {
            v.push(format!(
                "schedule: need 0 < beta_start ≤ beta_end < 1 (got {b0}, {b1})"
            ));
        }
        // latent must halve cleanly at every U-Net level
        let f = self.ae.downsample_factor.max(1);
        if self.ae.violations().is_empty() && !self.image_size.is_multiple_of(f) {
            v.push(format!(
                "image_size: {} is not divisible by ae.downsample_factor {f}",
                self.image_size
            ));
        } else if self.ae.violations().is_empty() && self.unet.levels > 0 {
            let latent = self.image_size / f;
            let need = 1usize << (self.unet.levels - 1).min(16);
            if !latent.is_multiple_of(need) {
                v.push(format!(
                    "unet.levels: latent size {latent} is not divisible by 2^(levels-1) = {need}"
                ));
            }
        }
        v
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parse and validate; the error lists every violation.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let v = cfg.violations();
        if v.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule.build().expect("validated schedule")
    }
}

/// Config plus the exact file text it came from. Relative `data_root` is
/// resolved against the config file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: TrainConfig,
    pub text: String,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let mut config = TrainConfig::from_toml(&text)?;
    if config.data_root.is_relative() {
        if let Some(dir) = path.parent() {
            config.data_root = dir.join(&config.data_root);
        }
    }
    Ok(LoadedConfig { config, text })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = TrainConfig::from_toml("config_version = 1\ndata_root = \"data\"\n").unwrap();
        assert_eq!(cfg, TrainConfig::with_data_root("data"));
        let echo = cfg.to_toml();
        assert!(echo.contains("ema_decay = 0.999"));
        assert!(echo.contains("[unet.plan]"));
        assert_eq!(TrainConfig::from_toml(&echo).unwrap(), cfg);
    }

    #[test]
    fn all_violations_are_reported_together() {
        let text = r#"
config_version = 1
data_root = "d"
ema_decay = 1.5
batch_size = 0
[unet]
levels = 3
[unet.plan]
encoder = ["d", "c"]
middle = "a"
decoder = ["f", "c", "d"]
"#;
        let ConfigError::Invalid(v) = TrainConfig::from_toml(text).unwrap_err() else {
            panic!("expected violations")
        };
        assert!(
            v.iter()
                .any(|s| s.starts_with("ema_decay") && s.contains("(0, 1)")),
            "{v:?}"
        );
        assert!(v.iter().any(|s| s.starts_with("batch_size")));
        assert!(v
            .iter()
            .any(|s| s.starts_with("unet.plan.encoder") && s.contains("levels = 3")));
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(matches!(
            TrainConfig::from_toml("config_version = 1\ndata_root = \"d\"\nlearnign_rate = 1\n"),
            Err(ConfigError::Parse(_))
        ));
        let ConfigError::Invalid(v) =
            TrainConfig::from_toml("config_version = 2\ndata_root = \"d\"\n").unwrap_err()
        else {
            panic!()
        };
        assert!(v[0].starts_with("config_version"));
    }

    #[test]
    fn schedule_section_uses_capital_t() {
        let cfg = TrainConfig::from_toml(
            "config_version = 1\ndata_root = \"d\"\n[schedule]\nT = 200\nbeta_start = 5e-4\nbeta_end = 0.1\nkind = \"linear\"\n",
        )
        .unwrap();
        assert_eq!(cfg.schedule().len(), 200);
        assert!(cfg.to_toml().contains("T = 200"));
    }

    #[test]
    fn latent_divisibility_is_cross_checked() {
        let mut cfg = TrainConfig::with_data_root("d");
        cfg.image_size = 40;
        assert!(cfg
            .violations()
            .iter()
            .any(|s| s.starts_with("unet.levels")));
        cfg.image_size = 42;
        assert!(cfg
            .violations()
            .iter()
            .any(|s| s.contains("not divisible by ae.downsample_factor")));
    }
}
