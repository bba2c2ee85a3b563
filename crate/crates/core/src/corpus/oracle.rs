// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic lexicon oracles for offensiveness and stance.

use serde::{Deserialize, Serialize};

use super::vocab::{Role, Vocab};
use crate::error::Result;

/// Smoothing mass added to the support and deny counts.
pub const STANCE_SMOOTHING: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Support,
    Deny,
    Comment,
    Query,
}

impl Stance {
    pub const ALL: [Stance; 4] = [
        Stance::Support,
        Stance::Deny,
        Stance::Comment,
        Stance::Query,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stance::Support => "support",
            Stance::Deny => "deny",
            Stance::Comment => "comment",
            Stance::Query => "query",
        }
    }

    pub fn is_neutral(self) -> bool {
        matches!(self, Stance::Comment | Stance::Query)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StanceScores {
    pub support: f64,
    pub deny: f64,
    pub comment: f64,
    pub query: f64,
}

impl StanceScores {
    pub fn as_array(&self) -> [f64; 4] {
        [self.support, self.deny, self.comment, self.query]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            support: a[0],
            deny: a[1],
            comment: a[2],
            query: a[3],
        }
    }

    pub fn get(&self, s: Stance) -> f64 {
        match s {
            Stance::Support => self.support,
            Stance::Deny => self.deny,
            Stance::Comment => self.comment,
            Stance::Query => self.query,
        }
    }

    /// Highest-scoring class; ties resolve in `Stance::ALL` order.
    pub fn argmax(&self) -> Stance {
        let a = self.as_array();
        let mut best = 0;
        for i in 1..4 {
            if a[i] > a[best] {
                best = i;
            }
        }
        Stance::ALL[best]
    }
}

/// 1 iff the sequence contains any marked token (train or heldout).
pub fn offense_oracle(seq: &[u32], vocab: &Vocab) -> Result<bool> {
    let mut hit = false;
    for &t in seq {
        hit |= vocab.is_marked(t)?;
    }
    Ok(hit)
}

/// Graded stance scores from support/deny counts and query-marker presence.
pub fn stance_oracle(seq: &[u32], vocab: &Vocab) -> Result<StanceScores> {
    let (mut n_s, mut n_d, mut q) = (0usize, 0usize, false);
    for &t in seq {
        match vocab.role(t)? {
            Role::Support => n_s += 1,
            Role::Deny => n_d += 1,
            Role::Query => q = true,
            _ => {}
        }
    }
    Ok(stance_from_counts(n_s, n_d, q))
}

pub(crate) fn stance_from_counts(n_s: usize, n_d: usize, q: bool) -> StanceScores {
    if n_s == 0 && n_d == 0 {
        return if q {
            StanceScores {
                query: 1.0,
                ..Default::default()
            }
        } else {
            StanceScores {
                comment: 1.0,
                ..Default::default()
            }
        };
    }
    let eps = STANCE_SMOOTHING;
    let qf = if q { 1.0 } else { 0.0 };
    let denom = n_s as f64 + n_d as f64 + 2.0 * eps + qf;
    let support = (n_s as f64 + eps) / denom;
    let deny = (n_d as f64 + eps) / denom;
    let query = qf / denom;
    let comment = (1.0 - support - deny - query).max(0.0);
    StanceScores {
        support,
        deny,
        comment,
        query,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::LexiconSizes;

    fn vocab() -> Vocab {
        Vocab::build(&LexiconSizes::default(), 6).unwrap()
    }

    #[test]
    fn filler_only_is_inoffensive_comment() {
        let v = vocab();
        let seq = v.filler[..5].to_vec();
        assert!(!offense_oracle(&seq, &v).unwrap());
        let s = stance_oracle(&seq, &v).unwrap();
        assert_eq!(s.comment, 1.0);
        assert_eq!(s.argmax(), Stance::Comment);
    }

    #[test]
    fn heldout_token_is_offensive() {
        let v = vocab();
        let seq = vec![v.filler[0], v.heldout_marked[0], v.topic[1]];
        assert!(offense_oracle(&seq, &v).unwrap());
    }

    #[test]
    fn two_support_tokens() {
        let v = vocab();
        let seq = vec![v.support[0], v.topic[0], v.support[3]];
        let s = stance_oracle(&seq, &v).unwrap();
        assert!((s.support - 2.1 / 2.2).abs() < 1e-12);
        assert!((s.deny - 0.1 / 2.2).abs() < 1e-12);
        assert!((s.support - 0.954_545_454_5).abs() < 1e-9);
        assert!(s.comment.abs() < 1e-12);
    }

    #[test]
    fn equal_counts_are_symmetric() {
        let v = vocab();
        let seq = vec![v.support[0], v.deny[0], v.support[1], v.deny[2]];
        let s = stance_oracle(&seq, &v).unwrap();
        assert_eq!(s.support, s.deny);
    }

    #[test]
    fn query_only_and_mixed_query() {
        let v = vocab();
        let s = stance_oracle(&[v.topic[0], v.query_marker], &v).unwrap();
        assert_eq!(s.query, 1.0);
        let s = stance_oracle(&[v.deny[0], v.query_marker], &v).unwrap();
        assert!((s.deny - 1.1 / 2.2).abs() < 1e-12);
        assert!((s.query - 1.0 / 2.2).abs() < 1e-12);
        assert!((s.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_token_is_an_error() {
        let v = vocab();
        assert!(offense_oracle(&[999], &v).is_err());
        assert!(stance_oracle(&[999], &v).is_err());
    }

    proptest::proptest! {
        #[test]
        fn stance_scores_normalize(seq in proptest::collection::vec(0u32..120, 0..30)) {
            let v = vocab();
            let s = stance_oracle(&seq, &v).unwrap();
            let total: f64 = s.as_array().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-9);
            for x in s.as_array() {
                proptest::prop_assert!((0.0..=1.0).contains(&x));
            }
            // purity
            proptest::prop_assert_eq!(s, stance_oracle(&seq, &v).unwrap());
            proptest::prop_assert_eq!(offense_oracle(&seq, &v).unwrap(), offense_oracle(&seq, &v).unwrap());
        }
    }
}
