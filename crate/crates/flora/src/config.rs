//! Run configuration files (TOML, strictly parsed).
//!
//! Unknown keys are rejected and reported with their key path. Every CLI
//! run re-serializes its fully resolved configuration next to its outputs,
//! so a run can be reproduced from the artifact directory alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSpec;
use crate::bench::BenchParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{SyntheticTask, TaskKind, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Overrides `model.adapter` when present.
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub bench: Option<BenchParams>,
    #[serde(default)]
    pub task: Option<SyntheticTask>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn for_model(model: ModelConfig) -> Self {
        RunConfig {
            model,
            adapter: None,
            train: None,
            bench: None,
            task: None,
            seed: 0,
            output_dir: None,
        }
    }

    /// Strict parse; the error names the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse failed: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_model()?.validate()?;
        if let Some(train) = &self.train {
            train.validate()?;
        }
        if let Some(bench) = &self.bench {
            bench.validate()?;
        }
        if let Some(task) = &self.task {
            task.validate(self.model.vocab_size)?;
        }
        Ok(())
    }

    /// Model config with the adapter section folded in.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        let mut model = self.model.clone();
        if let Some(adapter) = &self.adapter {
            model.adapter = adapter.clone();
        }
        Ok(model)
    }

    pub fn task_or_default(&self) -> SyntheticTask {
        self.task.clone().unwrap_or_else(|| SyntheticTask::new(TaskKind::Copy))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Writes the fully resolved config beside a run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let mut resolved = self.clone();
        resolved.model = self.resolved_model()?;
        resolved.adapter = None;
        resolved.output_dir = Some(out_dir.to_path_buf());
        std::fs::write(out_dir.join("resolved_config.toml"), resolved.to_toml()?)?;
        Ok(())
    }
}

/// Parses a comma/whitespace-separated token-id list (the `--prompt` flag).
pub fn parse_token_list(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for (i, piece) in text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .enumerate()
    {
        let tok: u32 = piece.parse().map_err(|_| {
            Error::Config(format!("prompt entry {} ({piece:?}) is not a token id", i + 1))
        })?;
        out.push(tok);
    }
    if out.is_empty() {
        return Err(Error::Config("prompt must contain at least one token id".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Variant;

    #[test]
    fn strict_parsing_rejects_unknown_keys() {
        let text = r#"
            seed = 3
            [model]
            d_model = 64
            n_layers = 2
            n_heads = 4
            n_kv_heads = 2
            d_ff = 256
            vocab_size = 256
            max_seq_len = 256
            not_a_field = 1
        "#;
        let err = RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("not_a_field"), "error should name the key: {err}");
    }

    #[test]
    fn adapter_section_overrides_model() {
        let text = r#"
            [model]
            d_model = 64
            n_layers = 2
            n_heads = 4
            n_kv_heads = 2
            d_ff = 256
            vocab_size = 256
            max_seq_len = 256

            [adapter]
            variant = "pf_lora"
            rank = 8
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        let model = cfg.resolved_model().unwrap();
        assert_eq!(model.adapter.variant, Variant::PfLora);
        assert_eq!(model.adapter.rank, 8);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::for_model(crate::model::ModelConfig::toy());
        cfg.adapter = Some(AdapterSpec::new(Variant::FfbaQgAdd, 8));
        cfg.train = Some(TrainConfig::new(0.01, 10, 5));
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.resolved_model().unwrap(), cfg.resolved_model().unwrap());
    }

    #[test]
    fn token_list_parser() {
        assert_eq!(parse_token_list("1,2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_token_list(" 7 8,9 ").unwrap(), vec![7, 8, 9]);
        assert!(parse_token_list("").is_err());
        assert!(parse_token_list("1,x,3").is_err());
        assert!(parse_token_list("-4").is_err());
    }
}
