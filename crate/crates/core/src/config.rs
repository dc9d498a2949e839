//! Experiment configuration: one TOML file with a section per module, plus
//! `section.key=value` overrides.

use serde::{Deserialize, Serialize};

use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::postprocess::DecodeConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Synthetic dataset settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub canvas_height: usize,
    pub canvas_width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { canvas_height: crate::data::DEFAULT_CANVAS.0, canvas_width: crate::data::DEFAULT_CANVAS.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
}

/// Parses a TOML scalar, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Builds a config from optional TOML text and overrides such as
    /// `train.learning_rate=1e-3` or `model.input_size=[128,128]`. Unknown
    /// sections or keys are rejected.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = match text {
            Some(t) => t.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::Override(o.clone()));
            }
            let mut cur = &mut table;
            for p in &parts[..parts.len() - 1] {
                let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                cur = entry.as_table_mut().ok_or_else(|| ConfigError::Override(o.clone()))?;
            }
            cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p).map_err(|e| ConfigError::Io { path: p.display().to_string(), source: e })?,
            ),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.loss.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        self.decode.validate().map_err(|e| inv(&e))?;
        if self.data.canvas_height < 64 || self.data.canvas_width < 64 {
            return Err(ConfigError::Invalid("canvas sides must be at least 64".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
