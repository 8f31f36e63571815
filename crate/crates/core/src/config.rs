//! Run configuration: model, optimiser, decoding and data settings in one
//! TOML file. Three presets ship with the crate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::DecodeConfig;
use crate::knowledge::DEFAULT_K;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub min_freq: usize,
    pub retrieval_k: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            min_freq: 1,
            retrieval_k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
}

pub const PRESETS: [(&str, &str); 3] = [
    ("test-nano", include_str!("../../../configs/test-nano.toml")),
    (
        "test-small",
        include_str!("../../../configs/test-small.toml"),
    ),
    (
        "desk-default",
        include_str!("../../../configs/desk-default.toml"),
    ),
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn preset(name: &str) -> Option<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml(text).expect("shipped presets parse"))
    }

    /// A preset name or a path to a TOML file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Some(c) = Self::preset(spec) {
            return Ok(c);
        }
        let path = Path::new(spec);
        if !path.exists() {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
            return Err(Error::config(format!(
                "config `{spec}` is neither a file nor a preset ({})",
                names.join(", ")
            )));
        }
        let text = crate::io::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Validates everything except `vocab_size`, which may still be 0.
    pub fn validate(&self) -> Result<()> {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = crate::textproc::special::COUNT;
        }
        m.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.data.min_freq == 0 {
            return Err(Error::config("min_freq must be at least 1"));
        }
        if self.data.retrieval_k == 0 {
            return Err(Error::config("retrieval_k must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for (name, _) in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
        }
        let nano = RunConfig::preset("test-nano").unwrap();
        assert_eq!(
            (
                nano.model.d_model,
                nano.model.n_heads,
                nano.model.vocab_size
            ),
            (16, 2, 50)
        );
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::preset("desk-default").unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml("[model]\nd_modle = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn missing_sections_take_defaults() {
        let c = RunConfig::from_toml("[train]\nmax_steps = 7\n").unwrap();
        assert_eq!(c.train.max_steps, 7);
        assert_eq!(c.model, ModelConfig::default());
    }
}
