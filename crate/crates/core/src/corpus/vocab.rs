// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed ids of the special tokens; they always occupy ids 0..5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub sep: u32,
    pub readout: u32,
}

/// Lexicon a token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Special,
    Topic,
    TrainMarked,
    HeldoutMarked,
    Support,
    Deny,
    Query,
    Filler,
}

/// Sizes of each lexicon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconSizes {
    pub topic: usize,
    pub marked: usize,
    pub support: usize,
    pub deny: usize,
    pub filler: usize,
}

impl Default for LexiconSizes {
    fn default() -> Self {
        Self {
            topic: 24,
            marked: 20,
            support: 6,
            deny: 6,
            filler: 58,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    special: Specials,
    topic: Vec<u32>,
    train_marked: Vec<u32>,
    heldout_marked: Vec<u32>,
    support: Vec<u32>,
    deny: Vec<u32>,
    query_marker: u32,
    filler: Vec<u32>,
}

/// The synthetic vocabulary with its lexicon partition.
///
/// Every id belongs to exactly one lexicon (or is special); `roles` is a
/// dense lookup table derived from the partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub special: Specials,
    pub topic: Vec<u32>,
    pub train_marked: Vec<u32>,
    pub heldout_marked: Vec<u32>,
    pub support: Vec<u32>,
    pub deny: Vec<u32>,
    pub query_marker: u32,
    pub filler: Vec<u32>,
    roles: Vec<Role>,
}

impl Vocab {
    /// Build the vocabulary. Ids are assigned in a fixed order: specials,
    /// topic, marked (train part first), support, deny, query marker, filler.
    pub fn build(sizes: &LexiconSizes, n_heldout: usize) -> Result<Self> {
        if n_heldout == 0 || n_heldout >= sizes.marked {
            return Err(Error::Config(format!(
                "heldout marked count {n_heldout} must be in 1..{}",
                sizes.marked
            )));
        }
        for (name, n) in [
            ("topic", sizes.topic),
            ("support", sizes.support),
            ("deny", sizes.deny),
            ("filler", sizes.filler),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} lexicon must be nonempty")));
            }
        }
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "<sep>", "<readout>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let special = Specials {
            pad: 0,
            bos: 1,
            eos: 2,
            sep: 3,
            readout: 4,
        };
        let take = |prefix: &str, n: usize, tokens: &mut Vec<String>| -> Vec<u32> {
            (0..n)
                .map(|i| {
                    tokens.push(format!("{prefix}{i:02}"));
                    (tokens.len() - 1) as u32
                })
                .collect()
        };
        let topic = take("topic", sizes.topic, &mut tokens);
        let n_train = sizes.marked - n_heldout;
        let train_marked = take("slur", n_train, &mut tokens);
        let heldout_marked = take("xslur", n_heldout, &mut tokens);
        let support = take("agree", sizes.support, &mut tokens);
        let deny = take("nope", sizes.deny, &mut tokens);
        tokens.push("?".to_string());
        let query_marker = (tokens.len() - 1) as u32;
        let filler = take("w", sizes.filler, &mut tokens);
        Self::from_repr(VocabRepr {
            tokens,
            special,
            topic,
            train_marked,
            heldout_marked,
            support,
            deny,
            query_marker,
            filler,
        })
    }

    fn from_repr(r: VocabRepr) -> Result<Self> {
        let v = r.tokens.len();
        let mut roles: Vec<Option<Role>> = vec![None; v];
        let mut assign = |ids: &[u32], role: Role| -> Result<()> {
            for &id in ids {
                let slot = roles.get_mut(id as usize).ok_or(Error::UnknownToken {
                    token: id,
                    vocab: v,
                })?;
                if slot.is_some() {
                    return Err(Error::Config(format!(
                        "token {id} assigned to more than one lexicon"
                    )));
                }
                *slot = Some(role);
            }
            Ok(())
        };
        let s = r.special;
        assign(&[s.pad, s.bos, s.eos, s.sep, s.readout], Role::Special)?;
        assign(&r.topic, Role::Topic)?;
        assign(&r.train_marked, Role::TrainMarked)?;
        assign(&r.heldout_marked, Role::HeldoutMarked)?;
        assign(&r.support, Role::Support)?;
        assign(&r.deny, Role::Deny)?;
        assign(&[r.query_marker], Role::Query)?;
        assign(&r.filler, Role::Filler)?;
        if r.heldout_marked.is_empty() {
            return Err(Error::Config("heldout marked lexicon is empty".into()));
        }
        let roles = roles
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::Config(format!("token {i} has no lexicon"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tokens: r.tokens,
            special: r.special,
            topic: r.topic,
            train_marked: r.train_marked,
            heldout_marked: r.heldout_marked,
            support: r.support,
            deny: r.deny,
            query_marker: r.query_marker,
            filler: r.filler,
            roles,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn role(&self, token: u32) -> Result<Role> {
        self.roles
            .get(token as usize)
            .copied()
            .ok_or(Error::UnknownToken {
                token,
                vocab: self.len(),
            })
    }

    pub fn is_marked(&self, token: u32) -> Result<bool> {
        Ok(matches!(
            self.role(token)?,
            Role::TrainMarked | Role::HeldoutMarked
        ))
    }

    /// Render a token sequence as space-separated strings.
    pub fn render(&self, seq: &[u32]) -> String {
        seq.iter()
            .map(|&t| {
                self.tokens
                    .get(t as usize)
                    .map_or("<unk>", String::as_str)
                    .to_string()
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(r: VocabRepr) -> Result<Self> {
        Self::from_repr(r)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            special: v.special,
            topic: v.topic,
            train_marked: v.train_marked,
            heldout_marked: v.heldout_marked,
            support: v.support,
            deny: v.deny,
            query_marker: v.query_marker,
            filler: v.filler,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn lexicons_partition_the_vocabulary() {
        let v = Vocab::build(&LexiconSizes::default(), 6).unwrap();
        assert_eq!(v.len(), 120);
        let mut seen = HashSet::new();
        let s = v.special;
        let all = [s.pad, s.bos, s.eos, s.sep, s.readout, v.query_marker]
            .into_iter()
            .chain(v.topic.iter().copied())
            .chain(v.train_marked.iter().copied())
            .chain(v.heldout_marked.iter().copied())
            .chain(v.support.iter().copied())
            .chain(v.deny.iter().copied())
            .chain(v.filler.iter().copied());
        for t in all {
            assert!(seen.insert(t), "token {t} appears twice");
        }
        assert_eq!(seen.len(), v.len());
        assert_eq!(v.heldout_marked.len(), 6);
    }

    #[test]
    fn heldout_count_is_validated() {
        assert!(Vocab::build(&LexiconSizes::default(), 0).is_err());
        assert!(Vocab::build(&LexiconSizes::default(), 20).is_err());
    }

    #[test]
    fn serde_rejects_overlapping_lexicons() {
        let v = Vocab::build(&LexiconSizes::default(), 6).unwrap();
        let mut json: serde_json::Value = serde_json::to_value(&v).unwrap();
        json["deny"][0] = json["support"][0].clone();
        assert!(serde_json::from_value::<Vocab>(json).is_err());
        let back: Vocab = serde_json::from_value(serde_json::to_value(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
