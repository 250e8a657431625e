//! The TOML document every CLI subcommand reads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::{ClassifierConfig, RetrainConfig};
use crate::error::{Error, Result};
use crate::probes::ProbeConfig;
use crate::synthdata::{CorpusSpec, Split, Utterance};
use crate::training::TrainConfig;
use crate::vaeve::VaeveConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in training and classification.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub vaeve: VaeveConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub retrain: RetrainConfig,
    pub probe: ProbeConfig,
    pub split: SplitConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.vaeve.validate()?;
        self.train.validate()?;
        self.classifier.validate()?;
        self.retrain.validate()?;
        if self.corpus.feature_dim != self.vaeve.feature_dim {
            return Err(Error::Config(format!(
                "corpus.feature_dim = {} but vaeve.feature_dim = {}",
                self.corpus.feature_dim, self.vaeve.feature_dim
            )));
        }
        if self.corpus.phonemes != self.vaeve.phoneme_count {
            return Err(Error::Config(format!(
                "corpus.phonemes = {} but vaeve.phoneme_count = {}",
                self.corpus.phonemes, self.vaeve.phoneme_count
            )));
        }
        if self.retrain.context_radius != self.classifier.context_radius {
            return Err(Error::Config(format!(
                "retrain.context_radius = {} but classifier.context_radius = {}",
                self.retrain.context_radius, self.classifier.context_radius
            )));
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split.test_fraction must lie in (0, 1), got {}",
                self.split.test_fraction
            )));
        }
        Ok(())
    }

    pub fn split(&self, corpus: &[Utterance]) -> Result<Split> {
        Split::random(corpus, self.split.test_fraction, self.split.seed)
    }
}
