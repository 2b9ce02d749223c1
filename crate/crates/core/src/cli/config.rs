use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalOptions;
use crate::model::ModelConfig;
use crate::phantom::PhantomConfig;
use crate::training::TrainConfig;

/// Everything a config file may set. Missing sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let invalid = |reason: String| Error::Validation { path: path.to_path_buf(), reason };
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| invalid(e.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[train]\nbatch_size = 4\n\n[model]\nattention_heads = 4\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.epochs, 40);
        assert_eq!(c.model.attention_heads, 4);
        fs::write(&p, "[train]\nbatch = 4\n").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Validation { .. })));
    }
}
