// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{BankTrainConfig, ClassifierConfig, ConcatOrder};
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::prefix::PrefixConfig;
use crate::tinylm::{GenConfig, LmConfig, LmTrainConfig};
use crate::training::{LossWeights, TrainConfig};

/// Everything a run needs. Every field has a default, so an empty TOML file
/// is a valid config.
///
/// `seed` is the single source of randomness: [`RunConfig::resolve`]
/// overwrites the per-component `seed` fields from it, and `lm.vocab` from
/// the corpus lexicon sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    pub base_train: LmTrainConfig,
    /// Width multiplier of the perplexity reference model over `lm.hidden`.
    pub reference_width: usize,
    pub reference_train: LmTrainConfig,
    pub prefix: PrefixConfig,
    pub toxicity: BankTrainConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub prefix_tuning: BankTrainConfig,
    pub contrastive: BankTrainConfig,
    pub stance: BankTrainConfig,
    pub classifier: ClassifierConfig,
    pub concat_order: ConcatOrder,
    pub gen: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            run_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            lm: LmConfig::default(),
            base_train: LmTrainConfig {
                steps: 6000,
                ..LmTrainConfig::default()
            },
            reference_width: 2,
            reference_train: LmTrainConfig::default(),
            prefix: PrefixConfig::default(),
            toxicity: BankTrainConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            prefix_tuning: BankTrainConfig::default(),
            contrastive: BankTrainConfig::default(),
            stance: BankTrainConfig::default(),
            classifier: ClassifierConfig::default(),
            concat_order: ConcatOrder::default(),
            gen: GenConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Propagate the master seed and the corpus vocabulary size, then
    /// validate.
    pub fn resolve(mut self) -> Result<Self> {
        let s = self.seed;
        self.corpus.seed = s;
        self.lm.seed = s;
        self.base_train.seed = s;
        self.reference_train.seed = s.wrapping_add(1);
        self.toxicity.seed = s.wrapping_add(2);
        self.train.seed = s.wrapping_add(3);
        self.prefix_tuning.seed = s.wrapping_add(4);
        self.contrastive.seed = s.wrapping_add(5);
        self.stance.seed = s.wrapping_add(6);
        self.classifier.seed = s.wrapping_add(7);
        let lex = &self.corpus.lexicon;
        // five specials plus the query marker
        self.lm.vocab = 6 + lex.topic + lex.marked + lex.support + lex.deny + lex.filler;
        self.validate()?;
        Ok(self)
    }

    pub fn reference_lm(&self) -> LmConfig {
        LmConfig {
            hidden: self.lm.hidden * self.reference_width,
            seed: self.lm.seed.wrapping_add(1),
            ..self.lm.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.lm.validate()?;
        self.reference_lm().validate()?;
        self.prefix.validate()?;
        self.toxicity.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        self.prefix_tuning.validate()?;
        self.contrastive.validate()?;
        self.stance.validate()?;
        self.gen.validate()?;
        if self.reference_width == 0 {
            return Err(Error::Config("reference_width must be positive".into()));
        }
        let ctx = self.corpus.max_context_len() + 2;
        let m = self.prefix.len;
        let need = [
            ctx + self.corpus.max_response_len() + m,
            ctx + 2 * m,
            ctx + 2 * m + self.gen.max_new_tokens,
        ];
        let need = need.into_iter().max().unwrap_or(0);
        if self.lm.max_seq < need {
            return Err(Error::Config(format!(
                "lm.max_seq {} is below the {need} positions the longest prefixed input needs",
                self.lm.max_seq
            )));
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.run_dir.join("corpus")
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.run_dir.join("ckpt")
    }

    pub fn artifact_dir(&self) -> PathBuf {
        self.run_dir.join("artifacts")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.run_dir.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults_and_round_trips() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn resolve_sets_vocab_and_seeds() {
        let c = RunConfig::from_toml("seed = 7\n[lm]\nhidden = 32\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.lm.vocab, 120);
        assert_eq!(c.lm.hidden, 32);
        assert_eq!(c.corpus.seed, 7);
        assert_eq!(c.reference_lm().hidden, 64);
    }

    #[test]
    fn unknown_keys_and_short_contexts_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[lm]\nmax_seq = 8\n")
            .unwrap()
            .resolve()
            .is_err());
    }
}
