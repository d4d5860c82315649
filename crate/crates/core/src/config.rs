//! Run configuration: TOML in, resolved snapshot out.
//!
//! Every field has a default, so an empty file is a valid config;
//! unknown keys are rejected so typos fail loudly instead of silently
//! reverting to defaults. Commands write the fully-resolved config
//! back out as `config.snapshot` next to their outputs, so every run
//! records exactly what it ran with.

use crate::datagen::{default_domains, DomainSpec, ImageGeometry};
use crate::model::{LossWeights, ModelGeometry, TrainOptions};
use crate::ttsp::{ShiftMode, SimilarityVariant};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Input image height/width.
    pub h0: usize,
    pub w0: usize,
    /// Samples per class per domain.
    pub n_per_class: usize,
    /// Generator seed. Kept separate from run seeds so every run of an
    /// ablation sees the same data.
    pub seed: u64,
    /// Domain to hold out for evaluation.
    pub held_out: String,
    pub domains: Vec<DomainSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            h0: 16,
            w0: 16,
            n_per_class: 256,
            seed: 42,
            held_out: "d3".into(),
            domains: default_domains(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Backbone output channels (the style dimension).
    pub channels: usize,
    /// Number of style bases in the bank.
    pub n_bases: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { channels: 16, n_bases: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub train_bank: bool,
    pub use_sty: bool,
    pub use_dsss: bool,
    pub projection: ShiftMode,
    pub detach_content_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        TrainConfig {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lambda_d: t.weights.lambda_d,
            lambda_c: t.weights.lambda_c,
            train_bank: t.train_bank,
            use_sty: t.use_sty,
            use_dsss: t.use_dsss,
            projection: t.projection,
            detach_content_targets: t.detach_content_targets,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub temperature: f64,
    pub similarity_variant: SimilarityVariant,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { temperature: 1.0, similarity_variant: SimilarityVariant::SigmaSigma }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub projection: ProjectionConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        Config::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.data.h0 < 3 || self.data.w0 < 3 {
            return bad(format!("image {}x{} too small for 3x3 convolutions", self.data.h0, self.data.w0));
        }
        if self.data.n_per_class == 0 {
            return bad("n_per_class must be ≥ 1".into());
        }
        if self.data.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        for d in &self.data.domains {
            d.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let mut ids: Vec<&str> = self.data.domains.iter().map(|d| d.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.data.domains.len() {
            return bad("domain ids must be unique".into());
        }
        if !self.data.domains.iter().any(|d| d.id == self.data.held_out) {
            return bad(format!("held_out domain `{}` is not in the domain list", self.data.held_out));
        }
        if self.data.domains.len() < 2 {
            return bad("need a training domain besides the held-out one".into());
        }
        if self.net.channels == 0 {
            return bad("channels must be ≥ 1".into());
        }
        if self.net.n_bases < 2 {
            return bad("n_bases must be ≥ 2 (style diversity needs pairs)".into());
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return bad(format!("lr = {}, want positive", self.train.lr));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return bad("epochs and batch_size must be ≥ 1".into());
        }
        for (name, v) in [("lambda_d", self.train.lambda_d), ("lambda_c", self.train.lambda_c)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v}, want ≥ 0"));
            }
        }
        if !(self.projection.temperature.is_finite() && self.projection.temperature > 0.0) {
            return bad(format!("temperature = {}, want positive", self.projection.temperature));
        }
        Ok(())
    }

    /// Image/depth-label geometry. The depth grid is the backbone's
    /// feature-map size by construction.
    pub fn image_geometry(&self) -> ImageGeometry {
        let mg = self.model_geometry();
        ImageGeometry { h0: self.data.h0, w0: self.data.w0, dh: mg.feat_h(), dw: mg.feat_w() }
    }

    pub fn model_geometry(&self) -> ModelGeometry {
        ModelGeometry { in_h: self.data.h0, in_w: self.data.w0, c: self.net.channels }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            weights: LossWeights { lambda_d: self.train.lambda_d, lambda_c: self.train.lambda_c },
            variant: self.projection.similarity_variant,
            temperature: self.projection.temperature,
            projection: self.train.projection,
            detach_content_targets: self.train.detach_content_targets,
            train_bank: self.train.train_bank,
            use_sty: self.train.use_sty,
            use_dsss: self.train.use_dsss,
        }
    }

    /// The fully-resolved TOML text written as `config.snapshot`.
    pub fn snapshot_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write `config.snapshot` into `dir` atomically.
    pub fn write_snapshot(&self, dir: &Path) -> std::io::Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.snapshot");
        let tmp = dir.join(".config.snapshot.tmp");
        std::fs::write(&tmp, self.snapshot_toml())?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
