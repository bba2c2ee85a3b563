// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic attribute-dialogue corpus, its lexicon oracles and file IO.

mod balance;
mod generate;
mod io;
mod oracle;
mod vocab;

pub use balance::{balance_with_oversampling, prepare_classifier_split, prepare_prefix_split};
pub use generate::{generate_corpus, Corpus, CorpusConfig, DialogueExample, Split};
pub use io::{
    read_corpus, read_split, split_path, write_corpus, write_split, CorpusHeader, CORPUS_FORMAT,
};
pub use oracle::{offense_oracle, stance_oracle, Stance, StanceScores, STANCE_SMOOTHING};
pub use vocab::{LexiconSizes, Role, Specials, Vocab};

/// `[BOS] c [SEP]`: the conditioning sequence the language model sees.
pub fn dialogue_context(vocab: &Vocab, c: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(c.len() + 2);
    out.push(vocab.special.bos);
    out.extend_from_slice(c);
    out.push(vocab.special.sep);
    out
}

/// `r [EOS]`: the target the language model is trained to produce.
pub fn dialogue_target(vocab: &Vocab, r: &[u32]) -> Vec<u32> {
    let mut out = r.to_vec();
    out.push(vocab.special.eos);
    out
}
