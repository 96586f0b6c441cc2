//! TOML run configuration. Unknown keys are rejected; every key has a default
//! (see [`ExperimentConfig::defaults_toml`]).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticSpec;
use crate::data::{CorpusFormat, CorpusOptions, EmbeddingOptions, Tokenizer};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{AdamWConfig, TrainConfig};

/// Environment variable that overrides `output.dir`.
pub const OUT_DIR_ENV: &str = "CHAMELEON_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    #[default]
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    pub path: Option<PathBuf>,
    pub format: CorpusFormat,
    pub tokenizer: Tokenizer,
    pub val_fraction: f64,
    pub embedding: EmbeddingOptions,
    pub synthetic: SyntheticSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            source: CorpusSource::Synthetic,
            path: None,
            format: CorpusFormat::Plain,
            tokenizer: Tokenizer::Char,
            val_fraction: 0.1,
            embedding: EmbeddingOptions::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Backbone shape; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        ModelDims {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            max_seq_len: d.max_seq_len,
        }
    }
}

impl ModelDims {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PretrainSource {
    /// A synthetic corpus over the same alphabet with unrelated styles.
    #[default]
    Pretext,
    /// The training split of the target corpus.
    Corpus,
    /// Keep the random initialization.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub source: PretrainSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    /// Seed offset of the pretext corpus relative to the data seed.
    pub pretext_seed_offset: u64,
    pub pretext: SyntheticSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            source: PretrainSource::Pretext,
            epochs: 2,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            grad_clip: 1.0,
            pretext_seed_offset: 1_000_003,
            pretext: SyntheticSpec {
                n_styles: 15,
                examples_per_style: 200,
                ..SyntheticSpec::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelDims,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn defaults_toml() -> String {
        Self::default().to_toml()
    }

    /// Applies the output-directory environment override.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            self.output.dir = PathBuf::from(dir);
        }
    }

    pub fn corpus_options(&self) -> CorpusOptions {
        CorpusOptions {
            format: self.corpus.format,
            tokenizer: self.corpus.tokenizer,
            max_seq_len: self.model.max_seq_len,
            val_fraction: self.corpus.val_fraction,
            seed: self.train.seeds.data,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            val_fraction: self.corpus.val_fraction,
            max_seq_len: self.model.max_seq_len,
            ..self.corpus.synthetic.clone()
        }
    }

    pub fn pretext_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            val_fraction: self.corpus.val_fraction,
            max_seq_len: self.model.max_seq_len,
            ..self.pretrain.pretext.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.corpus.val_fraction) {
            return bad("corpus.val_fraction must be in [0, 1)");
        }
        if self.corpus.source == CorpusSource::File && self.corpus.path.is_none() {
            return bad("corpus.path is required when corpus.source = \"file\"");
        }
        if self.train.batch_size == 0 || self.pretrain.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.train.lora.rank == 0 {
            return bad("lora.rank must be positive");
        }
        if !(0.0..1.0).contains(&self.train.lora.hyper_dropout) {
            return bad("lora.hyper_dropout must be in [0, 1)");
        }
        if self.train.optimizer.lr <= 0.0 || self.pretrain.optimizer.lr <= 0.0 {
            return bad("learning rates must be positive");
        }
        self.model.with_vocab(4).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Regime;

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = ExperimentConfig::defaults_toml();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "[train]\nregime = \"static_lora\"\nepochs = 3\n[train.lora]\nrank = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.train.regime, Regime::StaticLora);
        assert_eq!(cfg.train.lora.rank, 4);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("[train]\nepoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
        assert!(ExperimentConfig::from_toml_str("[nonsense]\n").is_err());
    }

    #[test]
    fn file_source_needs_a_path() {
        assert!(ExperimentConfig::from_toml_str("[corpus]\nsource = \"file\"\n").is_err());
    }
}
