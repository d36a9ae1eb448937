//! Model configs as JSON documents, and preset lookup.

use std::path::Path;

use cliquenet_core::network::{ModelConfig, PRESETS};

use crate::error::{CliError, Result};

pub fn config_from_json(text: &str) -> Result<ModelConfig> {
    let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_json(cfg: &ModelConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    config_from_json(&text)
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    ModelConfig::preset(name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        CliError::Usage(format!("unknown preset `{name}`; known: {}", names.join(", ")))
    })
}
