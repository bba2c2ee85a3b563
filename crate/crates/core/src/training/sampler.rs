// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Minibatch indices drawn half from each binary class, each class cycling
/// through its own reshuffled epoch. A missing class is simply skipped.
#[derive(Clone, Debug)]
pub struct StratifiedSampler {
    pools: [Vec<usize>; 2],
    cursors: [usize; 2],
    rng: ChaCha8Rng,
}

impl StratifiedSampler {
    pub fn new(labels: &[bool], seed: u64) -> Self {
        let mut pools = [Vec::new(), Vec::new()];
        for (i, &l) in labels.iter().enumerate() {
            pools[usize::from(l)].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut pools {
            p.shuffle(&mut rng);
        }
        Self {
            pools,
            cursors: [0, 0],
            rng,
        }
    }

    pub fn class_sizes(&self) -> [usize; 2] {
        [self.pools[0].len(), self.pools[1].len()]
    }

    fn draw(&mut self, class: usize) -> usize {
        if self.cursors[class] == self.pools[class].len() {
            self.pools[class].shuffle(&mut self.rng);
            self.cursors[class] = 0;
        }
        let i = self.pools[class][self.cursors[class]];
        self.cursors[class] += 1;
        i
    }

    /// `size` indices; class 0 receives the extra one when `size` is odd.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let [n0, n1] = self.class_sizes();
        let (k0, k1) = match (n0 > 0, n1 > 0) {
            (true, true) => (size - size / 2, size / 2),
            (true, false) => (size, 0),
            (false, true) => (0, size),
            (false, false) => (0, 0),
        };
        let mut out = Vec::with_capacity(size);
        for _ in 0..k0 {
            out.push(self.draw(0));
        }
        for _ in 0..k1 {
            out.push(self.draw(1));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_stratified_and_cover_each_class() {
        let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let mut s = StratifiedSampler::new(&labels, 1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..5 {
            let b = s.next_batch(8);
            assert_eq!(b.iter().filter(|&&i| labels[i]).count(), 4);
            seen.extend(b);
        }
        assert!(seen.iter().filter(|&&i| labels[i]).count() == 10);
    }

    #[test]
    fn single_class_still_fills_batches() {
        let mut s = StratifiedSampler::new(&[false, false, false], 1);
        assert_eq!(s.next_batch(5).len(), 5);
    }
}
