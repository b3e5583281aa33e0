//! Combined JSON configuration file; every field is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::CorpusConfig;
use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: CorpusConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config> {
        let c: Config = serde_json::from_str(text).map_err(|e| Error::data(format!("config: {e}")))?;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Config> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Config::from_json(&text)
            }
        }
    }

    pub fn hash(&self) -> String {
        crate::config_hash(self)
    }
}
