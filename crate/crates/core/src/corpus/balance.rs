// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::generate::DialogueExample;
use crate::error::{Error, Result};

/// Oversample every class up to the size of the largest one.
///
/// The input order is kept and resampled duplicates (uniform with
/// replacement within their class) are appended class by class in `expected`
/// order. Every class in `expected` must be present, and no other class may
/// appear.
pub fn balance_with_oversampling<T, K, F>(
    examples: &[T],
    key: F,
    expected: &[K],
    seed: u64,
) -> Result<Vec<T>>
where
    T: Clone,
    K: Ord + Clone + std::fmt::Debug,
    F: Fn(&T) -> K,
{
    let mut groups: BTreeMap<K, Vec<usize>> =
        expected.iter().map(|k| (k.clone(), vec![])).collect();
    for (i, e) in examples.iter().enumerate() {
        let k = key(e);
        match groups.get_mut(&k) {
            Some(g) => g.push(i),
            None => return Err(Error::Config(format!("unexpected class {k:?}"))),
        }
    }
    if let Some((k, _)) = groups.iter().find(|(_, g)| g.is_empty()) {
        return Err(Error::Empty(format!(
            "class {k:?} has no examples to oversample"
        )));
    }
    let max = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = examples.to_vec();
    for k in expected {
        let g = &groups[k];
        for _ in g.len()..max {
            out.push(examples[g[rng.random_range(0..g.len())]].clone());
        }
    }
    Ok(out)
}

/// Prefix-training preparation: drop neutral-stance examples, then balance
/// the four (t_c, s_r) cells.
pub fn prepare_prefix_split(
    examples: &[DialogueExample],
    seed: u64,
) -> Result<Vec<DialogueExample>> {
    let kept: Vec<DialogueExample> = examples
        .iter()
        .filter(|e| e.s_r.is_some())
        .cloned()
        .collect();
    balance_with_oversampling(
        &kept,
        |e| (e.t_c, e.s_r.unwrap_or(false)),
        &[(false, false), (false, true), (true, false), (true, true)],
        seed,
    )
}

/// Classifier preparation: keep neutral examples, balance on t_c.
pub fn prepare_classifier_split(
    examples: &[DialogueExample],
    seed: u64,
) -> Result<Vec<DialogueExample>> {
    balance_with_oversampling(examples, |e| e.t_c, &[false, true], seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate::{generate_corpus, CorpusConfig};

    #[test]
    fn minority_class_is_filled_up() {
        let xs: Vec<(u8, usize)> = (0..10)
            .map(|i| (0, i))
            .chain((0..4).map(|i| (1, i)))
            .collect();
        let out = balance_with_oversampling(&xs, |x| x.0, &[0, 1], 7).unwrap();
        assert_eq!(out.iter().filter(|x| x.0 == 0).count(), 10);
        assert_eq!(out.iter().filter(|x| x.0 == 1).count(), 10);
        assert_eq!(&out[..14], &xs[..]);
        assert!(out[14..].iter().all(|x| x.0 == 1 && x.1 < 4));
        assert_eq!(
            out,
            balance_with_oversampling(&xs, |x| x.0, &[0, 1], 7).unwrap()
        );
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let xs = vec![(0, 'a'), (1, 'b'), (0, 'c'), (1, 'd')];
        assert_eq!(
            balance_with_oversampling(&xs, |x| x.0, &[0, 1], 1).unwrap(),
            xs
        );
    }

    #[test]
    fn empty_or_unknown_class_is_an_error() {
        let xs = vec![(0, 'a')];
        assert!(balance_with_oversampling(&xs, |x| x.0, &[0, 1], 1).is_err());
        assert!(balance_with_oversampling(&xs, |x| x.0, &[1], 1).is_err());
    }

    #[test]
    fn prefix_split_cells_equalize() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        let out = prepare_prefix_split(&corpus.train_prefix, 5).unwrap();
        assert!(out.iter().all(|e| e.s_r.is_some()));
        let count = |tc: bool, sr: bool| {
            out.iter()
                .filter(|e| e.t_c == tc && e.s_r == Some(sr))
                .count()
        };
        let n = count(false, false);
        assert!(n > 0);
        for (tc, sr) in [(false, true), (true, false), (true, true)] {
            assert_eq!(count(tc, sr), n);
        }
        assert_eq!(out.len(), 4 * n);
    }
}
