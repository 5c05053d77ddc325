//! Run configuration: one TOML file with `[generation]`, `[filter]`, `[train]`
//! and `[backends]` sections. Missing fields take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// M: objects sampled per image.
    pub objects_per_image: usize,
    /// K: variations requested per object.
    pub variations_per_object: usize,
    pub keyword_word_limit: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            objects_per_image: 3,
            variations_per_object: 4,
            keyword_word_limit: 3,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.objects_per_image == 0 {
            return Err(invalid("[generation].objects_per_image", "must be >= 1"));
        }
        if self.variations_per_object == 0 {
            return Err(invalid("[generation].variations_per_object", "must be >= 1"));
        }
        if self.keyword_word_limit == 0 {
            return Err(invalid("[generation].keyword_word_limit", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub itm_threshold: f64,
    /// Percent of image area that must vary across the group.
    pub area_threshold: f64,
    /// Per-pixel channel-mean deviation cutoff on the 0-255 scale.
    pub epsilon: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            itm_threshold: 0.0,
            area_threshold: 14.0,
            epsilon: 2.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.itm_threshold.is_finite() {
            return Err(invalid("[filter].itm_threshold", "must be finite"));
        }
        if !(0.0..=100.0).contains(&self.area_threshold) {
            return Err(invalid(
                "[filter].area_threshold",
                format!("{} outside [0, 100]", self.area_threshold),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("[filter].epsilon", format!("{} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Fraction of each batch drawn from generated pairs.
    pub mix_ratio: f64,
    pub init_temperature: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub embedding_dim: usize,
    pub seed: u64,
    /// Optimizer family, recorded in run manifests. Only `adamw` is implemented.
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many steps even if epochs remain (0 = no cap).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 400,
            mix_ratio: 0.5,
            init_temperature: 0.07,
            learning_rate: 1e-6,
            weight_decay: 0.2,
            epochs: 20,
            embedding_dim: 64,
            seed: 0,
            optimizer: "adamw".to_string(),
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(invalid("[train].batch_size", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(invalid("[train].mix_ratio", format!("{} outside [0, 1]", self.mix_ratio)));
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err(invalid("[train].init_temperature", "must be > 0"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("[train].learning_rate", "must be >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("[train].weight_decay", "must be >= 0"));
        }
        if self.embedding_dim == 0 {
            return Err(invalid("[train].embedding_dim", "must be >= 1"));
        }
        if self.optimizer != "adamw" {
            return Err(invalid("[train].optimizer", format!("unsupported `{}`", self.optimizer)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(invalid("[train].adam_beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid("[train].adam_beta2", "must be in [0, 1)"));
        }
        if self.adam_eps <= 0.0 {
            return Err(invalid("[train].adam_eps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Seed for the mock backends' pseudo-random fallbacks.
    pub mock_seed: u64,
    pub embedding_dim: usize,
    pub tagger_url: Option<String>,
    pub segmenter_url: Option<String>,
    pub augmenter_url: Option<String>,
    pub inpainter_url: Option<String>,
    pub matcher_url: Option<String>,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub max_tokens: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            mock_seed: 7,
            embedding_dim: 64,
            tagger_url: None,
            segmenter_url: None,
            augmenter_url: None,
            inpainter_url: None,
            matcher_url: None,
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            max_tokens: 256,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.embedding_dim == 0 {
            return Err(invalid("[backends].embedding_dim", "must be >= 1"));
        }
        if self.max_in_flight == 0 {
            return Err(invalid("[backends].max_in_flight", "must be >= 1"));
        }
        if self.kind == BackendKind::Real
            && [&self.tagger_url, &self.segmenter_url, &self.augmenter_url, &self.inpainter_url, &self.matcher_url]
                .iter()
                .all(|u| u.is_none())
        {
            return Err(invalid("[backends].kind", "`real` needs at least one adapter url"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub generation: GenerationConfig,
    pub filter: FilterConfig,
    pub train: TrainConfig,
    pub backends: BackendConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        Ok(cfg)
    }

    /// Parse without validating; callers apply flag overrides first.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.generation.validate()?;
        self.filter.validate()?;
        self.train.validate()?;
        self.backends.validate()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = Config::default();
        assert_eq!(c.train.batch_size, 400);
        assert_eq!(c.train.learning_rate, 1e-6);
        assert_eq!(c.train.weight_decay, 0.2);
        assert_eq!(c.train.epochs, 20);
        assert_eq!(c.train.mix_ratio, 0.5);
        assert_eq!(c.filter.area_threshold, 14.0);
        assert_eq!(c.filter.itm_threshold, 0.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn area_threshold_bound_names_field() {
        let c = Config::from_toml_str("[filter]\narea_threshold = 200\n").unwrap();
        match c.validate() {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "[filter].area_threshold"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = Config::from_toml_str("[generation]\nseed = 9\n[train]\nbatch_size = 8\n").unwrap();
        assert_eq!(c.generation.seed, 9);
        assert_eq!(c.generation.variations_per_object, 4);
        assert_eq!(c.train.batch_size, 8);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(Config::from_toml_str("[filter]\nthreshold = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = Config::default();
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}
