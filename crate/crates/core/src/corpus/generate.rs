// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic attribute-dialogue generator.
//!
//! A context is a short bag of filler words around one or two topic words;
//! a marked context additionally carries exactly one marked word. A response
//! opens with its stance words (support or deny), copies one topic word from
//! the context, adds filler, and ends with the query marker when it asks a
//! question. Toxic responses contain a train-marked word; supportive replies
//! to marked contexts echo the marked word at `p_toxic_echo`, every other
//! reply is toxic at the base rate `p_toxic_response`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{offense_oracle, stance_oracle, Stance};
use super::vocab::{LexiconSizes, Vocab};
use crate::error::{Error, Result};

/// One dialogue turn with its labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueExample {
    pub c: Vec<u32>,
    pub r: Vec<u32>,
    #[serde(with = "bit")]
    pub t_c: bool,
    #[serde(with = "bit")]
    pub t_r: bool,
    #[serde(with = "opt_bit")]
    pub s_r: Option<bool>,
    pub stance4: Stance,
}

impl DialogueExample {
    /// The four training cases of contextual stance control, numbered 1..=4.
    pub fn case(&self) -> Option<u8> {
        let s = self.s_r?;
        Some(match (self.t_c, s) {
            (false, false) => 1,
            (false, true) => 2,
            (true, false) => 3,
            (true, true) => 4,
        })
    }
}

mod bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!(
                "expected 0 or 1, got {other}"
            ))),
        }
    }
}

mod opt_bit {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_u8(u8::from(*b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
        match Option::<u8>::deserialize(d)? {
            None => Ok(None),
            Some(0) => Ok(Some(false)),
            Some(1) => Ok(Some(true)),
            Some(other) => Err(serde::de::Error::custom(format!(
                "expected 0, 1 or null, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainPrefix,
    TrainClassifier,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::TrainPrefix,
        Split::TrainClassifier,
        Split::Dev,
        Split::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainPrefix => "train_prefix",
            Split::TrainClassifier => "train_classifier",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn is_train(self) -> bool {
        matches!(self, Split::TrainPrefix | Split::TrainClassifier)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_train_prefix: usize,
    pub n_train_classifier: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Proportions of cases 1..=4 among non-neutral prefix-training examples,
    /// before weighting by `p_marked_context`. The case-2 share of the
    /// unmarked half also sets the support rate for unmarked raw contexts.
    pub case_mix: [f64; 4],
    pub p_marked_context: f64,
    pub p_toxic_response: f64,
    /// Toxicity rate of supportive responses to marked contexts.
    pub p_toxic_echo: f64,
    pub sycophancy_rate: f64,
    /// Probability that a response takes a neutral (comment or query) stance.
    pub neutral_rate: f64,
    pub heldout_marked_fraction: f64,
    pub lexicon: LexiconSizes,
    /// Inclusive range of content tokens in a context.
    pub context_len: [usize; 2],
    /// Inclusive range of tokens in a response.
    pub response_len: [usize; 2],
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train_prefix: 1000,
            n_train_classifier: 4794,
            n_dev: 300,
            n_test: 300,
            case_mix: [0.25, 0.25, 0.3, 0.2],
            p_marked_context: 0.4,
            p_toxic_response: 0.05,
            p_toxic_echo: 0.7,
            sycophancy_rate: 0.6,
            neutral_rate: 0.15,
            heldout_marked_fraction: 0.3,
            lexicon: LexiconSizes::default(),
            context_len: [4, 7],
            response_len: [3, 6],
            seed: 42,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_marked_context", self.p_marked_context),
            ("p_toxic_response", self.p_toxic_response),
            ("p_toxic_echo", self.p_toxic_echo),
            ("sycophancy_rate", self.sycophancy_rate),
            ("neutral_rate", self.neutral_rate),
            ("heldout_marked_fraction", self.heldout_marked_fraction),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} is not in [0, 1]")));
            }
        }
        if self.case_mix.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("case_mix entries must be in [0, 1]".into()));
        }
        let total: f64 = self.case_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("case_mix sums to {total}, not 1")));
        }
        for (name, n) in [
            ("n_train_prefix", self.n_train_prefix),
            ("n_train_classifier", self.n_train_classifier),
            ("n_dev", self.n_dev),
            ("n_test", self.n_test),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.sycophancy_rate + self.neutral_rate > 1.0 + 1e-12 {
            return Err(Error::Config(
                "sycophancy_rate + neutral_rate exceeds 1".into(),
            ));
        }
        if self.neutral_rate < 1.0 && self.effective_case_weights().iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "prefix-training cases have zero total probability mass but a nonzero count".into(),
            ));
        }
        if self.context_len[0] < 2 || self.context_len[0] > self.context_len[1] {
            return Err(Error::Config(
                "context_len must be [min>=2, max>=min]".into(),
            ));
        }
        if self.response_len[0] < 2 || self.response_len[0] > self.response_len[1] {
            return Err(Error::Config(
                "response_len must be [min>=2, max>=min]".into(),
            ));
        }
        self.n_heldout()?;
        Ok(())
    }

    fn n_heldout(&self) -> Result<usize> {
        let n = (self.lexicon.marked as f64 * self.heldout_marked_fraction).round() as usize;
        if n == 0 || n >= self.lexicon.marked {
            return Err(Error::Config(format!(
                "heldout_marked_fraction {} leaves {n} of {} marked tokens held out",
                self.heldout_marked_fraction, self.lexicon.marked
            )));
        }
        Ok(n)
    }

    /// Case weights for the prefix-training split: unmarked cases scale by
    /// `1 - p_marked_context`, marked cases by `p_marked_context`.
    pub fn effective_case_weights(&self) -> [f64; 4] {
        let p = self.p_marked_context;
        let cm = self.case_mix;
        [cm[0] * (1.0 - p), cm[1] * (1.0 - p), cm[2] * p, cm[3] * p]
    }

    /// Support rate among non-neutral responses to unmarked contexts.
    pub fn unmarked_support_rate(&self) -> f64 {
        let tot = self.case_mix[0] + self.case_mix[1];
        if tot > 0.0 {
            self.case_mix[1] / tot
        } else {
            0.5
        }
    }

    /// Longest sequence any example can produce (context plus response).
    pub fn max_context_len(&self) -> usize {
        self.context_len[1]
    }

    /// Two stance words, a topic, an echo and the query marker can exceed
    /// the sampled length, so the bound is at least five.
    pub fn max_response_len(&self) -> usize {
        self.response_len[1].max(5)
    }
}

/// All four splits plus the vocabulary and the config that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub config: CorpusConfig,
    pub train_prefix: Vec<DialogueExample>,
    pub train_classifier: Vec<DialogueExample>,
    pub dev: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[DialogueExample] {
        match s {
            Split::TrainPrefix => &self.train_prefix,
            Split::TrainClassifier => &self.train_classifier,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, s: Split) -> &mut Vec<DialogueExample> {
        match s {
            Split::TrainPrefix => &mut self.train_prefix,
            Split::TrainClassifier => &mut self.train_classifier,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }
}

struct Generator<'a> {
    cfg: &'a CorpusConfig,
    vocab: &'a Vocab,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn raw_stance(&mut self, marked: bool) -> Stance {
        let u: f64 = self.rng.random();
        let n = self.cfg.neutral_rate;
        let neutral = |rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < 2.0 / 3.0 {
                Stance::Comment
            } else {
                Stance::Query
            }
        };
        if u < n {
            return neutral(&mut self.rng);
        }
        if marked {
            if u < n + self.cfg.sycophancy_rate {
                Stance::Support
            } else {
                Stance::Deny
            }
        } else if self.rng.random::<f64>() < self.cfg.unmarked_support_rate() {
            Stance::Support
        } else {
            Stance::Deny
        }
    }

    /// (marked, stance) for a prefix-training example; neutral examples keep
    /// their raw context marking.
    fn prefix_case(&mut self) -> (bool, Stance) {
        if self.rng.random::<f64>() < self.cfg.neutral_rate {
            let marked = self.rng.random::<f64>() < self.cfg.p_marked_context;
            let stance = if self.rng.random::<f64>() < 2.0 / 3.0 {
                Stance::Comment
            } else {
                Stance::Query
            };
            return (marked, stance);
        }
        let w = self.cfg.effective_case_weights();
        let total: f64 = w.iter().sum();
        let mut u = self.rng.random::<f64>() * total;
        // Floating-point leftovers fall through to the last positive case.
        let mut case = w.iter().rposition(|x| *x > 0.0).unwrap_or(0);
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                case = i;
                break;
            }
            u -= wi;
        }
        let marked = case >= 2;
        let stance = if case % 2 == 1 {
            Stance::Support
        } else {
            Stance::Deny
        };
        (marked, stance)
    }

    fn context(&mut self, marked: bool, split: Split) -> (Vec<u32>, Vec<u32>) {
        let [lo, hi] = self.cfg.context_len;
        let len = self.rng.random_range(lo..=hi);
        let n_topic = if len >= 4 && self.rng.random::<f64>() < 0.3 {
            2
        } else {
            1
        };
        let topics: Vec<u32> = self
            .vocab
            .topic
            .choose_multiple(&mut self.rng, n_topic)
            .copied()
            .collect();
        let mut c = topics.clone();
        if marked {
            let pool: Vec<u32> = if split.is_train() {
                self.vocab.train_marked.clone()
            } else {
                self.vocab
                    .train_marked
                    .iter()
                    .chain(&self.vocab.heldout_marked)
                    .copied()
                    .collect()
            };
            c.push(*pool.choose(&mut self.rng).expect("nonempty marked lexicon"));
        }
        while c.len() < len {
            c.push(*self.vocab.filler.choose(&mut self.rng).expect("filler"));
        }
        c.shuffle(&mut self.rng);
        (c, topics)
    }

    fn response(
        &mut self,
        context: &[u32],
        topics: &[u32],
        stance: Stance,
        toxic: bool,
    ) -> Vec<u32> {
        let [lo, hi] = self.cfg.response_len;
        let len = self.rng.random_range(lo..=hi);
        let mut head = Vec::new();
        match stance {
            Stance::Support | Stance::Deny => {
                let lex = if stance == Stance::Support {
                    &self.vocab.support
                } else {
                    &self.vocab.deny
                };
                head.push(*lex.choose(&mut self.rng).expect("stance lexicon"));
                if self.rng.random::<f64>() < 0.25 {
                    head.push(*lex.choose(&mut self.rng).expect("stance lexicon"));
                }
            }
            Stance::Comment | Stance::Query => {}
        }
        head.push(*topics.choose(&mut self.rng).expect("context has a topic"));
        let tail_len = usize::from(stance == Stance::Query);
        let mut body = Vec::new();
        if toxic {
            let echo = context
                .iter()
                .copied()
                .find(|t| self.vocab.train_marked.contains(t));
            let word = match echo {
                Some(w) => w,
                None => *self
                    .vocab
                    .train_marked
                    .choose(&mut self.rng)
                    .expect("marked"),
            };
            body.push(word);
        }
        while head.len() + body.len() + tail_len < len {
            body.push(*self.vocab.filler.choose(&mut self.rng).expect("filler"));
        }
        body.shuffle(&mut self.rng);
        let mut r = head;
        r.extend(body);
        if stance == Stance::Query {
            r.push(self.vocab.query_marker);
        }
        r
    }

    fn example(&mut self, marked: bool, stance: Stance, split: Split) -> Result<DialogueExample> {
        let (c, topics) = self.context(marked, split);
        let p_tox = if marked && stance == Stance::Support {
            self.cfg.p_toxic_echo
        } else {
            self.cfg.p_toxic_response
        };
        let toxic = self.rng.random::<f64>() < p_tox;
        let r = self.response(&c, &topics, stance, toxic);
        let t_c = offense_oracle(&c, self.vocab)?;
        let t_r = offense_oracle(&r, self.vocab)?;
        let stance4 = stance_oracle(&r, self.vocab)?.argmax();
        debug_assert_eq!(stance4, stance);
        let s_r = if split == Split::TrainPrefix && stance4.is_neutral() {
            None
        } else {
            Some(stance4 == Stance::Support)
        };
        Ok(DialogueExample {
            c,
            r,
            t_c,
            t_r,
            s_r,
            stance4,
        })
    }

    fn raw_split(&mut self, n: usize, split: Split) -> Result<Vec<DialogueExample>> {
        (0..n)
            .map(|_| {
                let marked = self.rng.random::<f64>() < self.cfg.p_marked_context;
                let stance = self.raw_stance(marked);
                self.example(marked, stance, split)
            })
            .collect()
    }
}

/// Generate the vocabulary and all four splits. Deterministic given the seed.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let vocab = Vocab::build(&config.lexicon, config.n_heldout()?)?;
    let mut g = Generator {
        cfg: config,
        vocab: &vocab,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let train_prefix = (0..config.n_train_prefix)
        .map(|_| {
            let (marked, stance) = g.prefix_case();
            g.example(marked, stance, Split::TrainPrefix)
        })
        .collect::<Result<Vec<_>>>()?;
    let train_classifier = g.raw_split(config.n_train_classifier, Split::TrainClassifier)?;
    let dev = g.raw_split(config.n_dev, Split::Dev)?;
    let test = g.raw_split(config.n_test, Split::Test)?;
    Ok(Corpus {
        vocab,
        config: config.clone(),
        train_prefix,
        train_classifier,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_train_prefix: 400,
            n_train_classifier: 400,
            n_dev: 100,
            n_test: 100,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusConfig {
            seed: 43,
            ..small()
        })
        .unwrap();
        assert_ne!(a.train_prefix, c.train_prefix);
    }

    #[test]
    fn no_marked_contexts_when_probability_is_zero() {
        let cfg = CorpusConfig {
            p_marked_context: 0.0,
            ..small()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for s in Split::ALL {
            assert!(corpus.split(s).iter().all(|e| !e.t_c));
        }
        assert!(corpus
            .train_prefix
            .iter()
            .all(|e| !matches!(e.case(), Some(3) | Some(4))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = CorpusConfig {
            case_mix: [0.5, 0.5, 0.5, 0.0],
            ..small()
        };
        assert!(generate_corpus(&bad).is_err());
        let bad = CorpusConfig {
            p_marked_context: 1.0,
            case_mix: [0.5, 0.5, 0.0, 0.0],
            ..small()
        };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
        let bad = CorpusConfig {
            n_dev: 0,
            ..small()
        };
        assert!(generate_corpus(&bad).is_err());
    }

    #[test]
    fn labels_match_oracles_and_contexts_link() {
        let corpus = generate_corpus(&small()).unwrap();
        let v = &corpus.vocab;
        let topic: HashSet<u32> = v.topic.iter().copied().collect();
        for s in Split::ALL {
            for e in corpus.split(s) {
                assert_eq!(e.t_c, offense_oracle(&e.c, v).unwrap());
                assert_eq!(e.t_r, offense_oracle(&e.r, v).unwrap());
                let st = stance_oracle(&e.r, v).unwrap().argmax();
                assert_eq!(st, e.stance4);
                match e.s_r {
                    Some(sr) => assert_eq!(sr, st == Stance::Support),
                    None => assert!(s == Split::TrainPrefix && st.is_neutral()),
                }
                assert!(e.r.iter().any(|t| topic.contains(t) && e.c.contains(t)));
            }
        }
    }

    #[test]
    fn heldout_tokens_stay_out_of_training_splits() {
        let corpus = generate_corpus(&small()).unwrap();
        let held: HashSet<u32> = corpus.vocab.heldout_marked.iter().copied().collect();
        for s in [Split::TrainPrefix, Split::TrainClassifier] {
            for e in corpus.split(s) {
                assert!(e.c.iter().chain(&e.r).all(|t| !held.contains(t)));
            }
        }
        // responses never carry heldout tokens in any split
        for s in Split::ALL {
            assert!(corpus
                .split(s)
                .iter()
                .all(|e| e.r.iter().all(|t| !held.contains(t))));
        }
        let seen_in_test = corpus
            .test
            .iter()
            .chain(&corpus.dev)
            .any(|e| e.c.iter().any(|t| held.contains(t)));
        assert!(seen_in_test);
    }

    #[test]
    fn prefix_split_has_all_four_cases() {
        let corpus = generate_corpus(&small()).unwrap();
        let cases: HashSet<u8> = corpus
            .train_prefix
            .iter()
            .filter_map(|e| e.case())
            .collect();
        assert_eq!(cases, HashSet::from([1, 2, 3, 4]));
    }
}
