//! Declarative run configuration, read from TOML.
//!
//! ```toml
//! seed = 1
//! output_dir = "runs"
//!
//! [corpus]      # CorpusConfig
//! [model]       # encoder architecture; vocabulary, length and classes follow the corpus
//! [training]    # TrainingConfig, shared by every method
//! [warmup]      # WarmupConfig
//! [distill]     # DistillConfig
//! [baselines]   # BaselineConfig
//! ```
//!
//! Every section and field is optional; omitted values take their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::data::{CorpusConfig, Split};
use crate::distill::{DistillConfig, WarmupConfig};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::train::TrainingConfig;

/// Encoder architecture. Vocabulary size, sequence length and class count
/// default to the corpus values; when given they must be compatible with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sequence_length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        ModelSection {
            num_layers: e.num_layers,
            hidden_dim: e.hidden_dim,
            num_heads: e.num_heads,
            ffn_dim: e.ffn_dim,
            dropout_rate: e.dropout_rate,
            vocab_size: None,
            max_sequence_length: None,
            num_classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation and every training-time random stream.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub training: TrainingConfig,
    pub warmup: WarmupConfig,
    pub distill: DistillConfig,
    pub baselines: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            corpus: CorpusConfig::default(),
            model: ModelSection::default(),
            training: TrainingConfig::default(),
            warmup: WarmupConfig::default(),
            distill: DistillConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates a config file, returning it with its raw text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    /// Every value, defaults included, as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("cannot serialise config: {e}")))
    }

    /// Checks every section and their mutual consistency. Field names in
    /// errors are qualified by section, e.g. `training.learning_rate`.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().map_err(|e| e.within("corpus"))?;
        self.training.validate().map_err(|e| e.within("training"))?;
        self.warmup.validate().map_err(|e| e.within("warmup"))?;
        self.distill.validate().map_err(|e| e.within("distill"))?;
        self.baselines.validate().map_err(|e| e.within("baselines"))?;
        let m = &self.model;
        if let Some(v) = m.vocab_size {
            if v < self.corpus.vocab_size {
                return Err(Error::config(
                    "model.vocab_size",
                    format!("{v} is smaller than corpus.vocab_size {}", self.corpus.vocab_size),
                ));
            }
        }
        if let Some(l) = m.max_sequence_length {
            if l < self.corpus.sequence_length {
                return Err(Error::config(
                    "model.max_sequence_length",
                    format!("{l} is shorter than corpus.sequence_length {}", self.corpus.sequence_length),
                ));
            }
        }
        if let Some(c) = m.num_classes {
            if c != self.corpus.num_classes {
                return Err(Error::config(
                    "model.num_classes",
                    format!("{c} differs from corpus.num_classes {}", self.corpus.num_classes),
                ));
            }
        }
        self.encoder().validate().map_err(|e| e.within("model"))
    }

    pub fn encoder(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            vocab_size: m.vocab_size.unwrap_or(self.corpus.vocab_size),
            max_sequence_length: m.max_sequence_length.unwrap_or(self.corpus.sequence_length),
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_heads: m.num_heads,
            ffn_dim: m.ffn_dim,
            dropout_rate: m.dropout_rate,
            num_classes: m.num_classes.unwrap_or(self.corpus.num_classes),
            seed: self.seed,
        }
    }

    /// Checks that a loaded split fits the encoder this config builds.
    pub fn check_split(&self, split: &Split) -> Result<()> {
        let enc = self.encoder();
        if split.num_classes != enc.num_classes {
            return Err(Error::config(
                "corpus.num_classes",
                format!(
                    "{} split has {} classes, the model expects {}",
                    split.kind.name(),
                    split.num_classes,
                    enc.num_classes
                ),
            ));
        }
        for s in &split.samples {
            if s.tokens.len() > enc.max_sequence_length {
                return Err(Error::config(
                    "model.max_sequence_length",
                    format!("sample {} has {} tokens, limit is {}", s.id, s.tokens.len(), enc.max_sequence_length),
                ));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= enc.vocab_size) {
                return Err(Error::config(
                    "model.vocab_size",
                    format!("sample {} uses token {t}, vocabulary has {}", s.id, enc.vocab_size),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 7\n[training]\nepochs = 2\n[corpus]\nnum_classes = 4\n[model]\nnum_layers = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.training.epochs, 2);
        let enc = cfg.encoder();
        assert_eq!((enc.num_classes, enc.num_layers, enc.seed), (4, 3, 7));
        assert_eq!(enc.vocab_size, cfg.corpus.vocab_size);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_toml("[training]\nlearning_rate = -1.0\n").unwrap_err();
        assert_eq!(field_of(e), "training.learning_rate");
        let e = RunConfig::from_toml("[model]\nnum_classes = 5\n").unwrap_err();
        assert_eq!(field_of(e), "model.num_classes");
        let e = RunConfig::from_toml("[model]\nvocab_size = 10\n").unwrap_err();
        assert_eq!(field_of(e), "model.vocab_size");
        let e = RunConfig::from_toml("[model]\nhidden_dim = 30\n").unwrap_err();
        assert_eq!(field_of(e), "model.hidden_dim");
        let e = RunConfig::from_toml("[distill]\nlambda = 1.5\n").unwrap_err();
        assert_eq!(field_of(e), "distill.lambda");
        let e = RunConfig::from_toml("[training]\nlerning_rate = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("lerning_rate"), "{e}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig {
            seed: 42,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
