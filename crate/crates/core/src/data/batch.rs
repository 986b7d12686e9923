use rand::seq::SliceRandom;

use crate::rng;

/// Shuffled mini-batch indices over `0..n`.
///
/// Each epoch is a fresh permutation drawn from the stream `(seed, epoch)`;
/// the last batch of an epoch may be short so that every example appears
/// exactly once per epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        let mut s = Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            pos: 0,
            order: Vec::new(),
        };
        s.order = s.permutation(0);
        s
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng::stream(self.seed, &[0xba7c4, epoch]));
        order
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Indices of the next batch; empty only when the dataset is empty.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.n == 0 {
            return Vec::new();
        }
        if self.pos >= self.n {
            self.epoch += 1;
            self.pos = 0;
            self.order = self.permutation(self.epoch);
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}
