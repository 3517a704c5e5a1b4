use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ImageTensor, Pair, RecipeDoc};
use crate::error::{invalid, Result};

/// Seeded epoch-by-epoch batching of `n` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    n: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if batch_size < 2 {
            return invalid(format!(
                "batch_size {batch_size} < 2: contrastive losses need negatives"
            ));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            drop_last,
        })
    }

    /// Index batches for `epoch`. The shuffle depends only on `(seed, epoch)`.
    /// A trailing batch of a single pair is always dropped.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .filter(|c| c.len() >= 2 && (!self.drop_last || c.len() == self.batch_size))
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        let full = self.n / self.batch_size;
        let rem = self.n % self.batch_size;
        full + usize::from(!self.drop_last && rem >= 2)
    }
}

/// Batches for the first epoch of a [`BatchPlan`].
pub fn make_batches(
    n_pairs: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    Ok(BatchPlan::new(n_pairs, batch_size, seed, drop_last)?.epoch(0))
}

/// Aligned views: `images[i]` pairs with `recipes[i]`.
#[derive(Clone, Debug)]
pub struct PairedBatch<'a> {
    pub indices: Vec<usize>,
    pub images: Vec<&'a ImageTensor>,
    pub recipes: Vec<&'a RecipeDoc>,
}

impl<'a> PairedBatch<'a> {
    pub fn gather(pairs: &'a [Pair], indices: &[usize]) -> Self {
        Self {
            indices: indices.to_vec(),
            images: indices.iter().map(|&i| &pairs[i].image).collect(),
            recipes: indices.iter().map(|&i| &pairs[i].recipe).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_counts() {
        assert_eq!(make_batches(10, 4, 0, true).unwrap().len(), 2);
        let b = make_batches(10, 4, 0, false).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b[2].len(), 2);
        assert_eq!(
            BatchPlan::new(10, 4, 0, false).unwrap().batches_per_epoch(),
            3
        );
        assert_eq!(
            BatchPlan::new(9, 4, 0, false).unwrap().batches_per_epoch(),
            2
        );
        assert_eq!(make_batches(9, 4, 0, false).unwrap().len(), 2);
    }

    #[test]
    fn batch_size_below_two_is_rejected() {
        assert!(make_batches(10, 1, 0, true).is_err());
    }

    #[test]
    fn same_seed_same_composition() {
        let a = BatchPlan::new(37, 5, 9, false).unwrap();
        let b = BatchPlan::new(37, 5, 9, false).unwrap();
        for e in 0..2 {
            assert_eq!(a.epoch(e), b.epoch(e));
        }
        assert_ne!(a.epoch(0), a.epoch(1));
    }

    #[test]
    fn every_pair_appears_once_per_epoch() {
        let plan = BatchPlan::new(23, 4, 1, false).unwrap();
        let mut seen: Vec<usize> = plan.epoch(3).concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }
}
