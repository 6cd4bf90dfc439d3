//! Run configuration: one TOML document covering every stage.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use idle_core::dataset::SyntheticConfig;
use idle_core::{PretrainConfig, StackConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Users with fewer interactions are dropped on load.
    pub min_len: usize,
    /// Items whose titles are longer than this are dropped on load.
    pub max_title_chars: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            min_len: idle_core::dataset::MIN_SEQUENCE_LEN,
            max_title_chars: idle_core::dataset::MAX_TITLE_CHARS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Unset falls back to `IDLE_SEED`, then to 42.
    pub seed: Option<u64>,
    /// Text file holding the hard-prompt template; built-in when unset.
    pub prompt_template: Option<PathBuf>,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub model: StackConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[train]\nlambada = 0.5").is_err());
        assert!(RunConfig::parse("[model.adapter]\nprompt_length = 2").is_err());
    }

    #[test]
    fn partial_documents_keep_defaults() {
        let c = RunConfig::parse("seed = 7\n[train]\nlambda = 0.2\n[model.backbone]\nlayers = 3")
            .unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.train.lambda, 0.2);
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.model.backbone.layers, 3);
        assert_eq!(c.model.adapter.prompt_len, 2);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.train.max_steps = Some(10);
        c.prompt_template = Some("t.txt".into());
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }
}
