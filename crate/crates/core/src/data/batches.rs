use super::{Corpus, UnlabeledCorpus};
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// Example indices of one step: a source batch and an equally sized target batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Endless shuffled passes over `0..n`.
#[derive(Clone, Debug)]
struct Cycler {
    n: usize,
    queue: Vec<usize>,
    at: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Cycler { n, queue: Vec::new(), at: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut SeededRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.at == self.queue.len() {
                self.queue = rng.permutation(self.n);
                self.at = 0;
            }
            let m = (k - out.len()).min(self.queue.len() - self.at);
            out.extend_from_slice(&self.queue[self.at..self.at + m]);
            self.at += m;
        }
        out
    }
}

/// Pairs source and target batches. One epoch is one pass over the larger
/// corpus in `ceil(larger / batch_size)` steps; the smaller corpus is
/// recycled, reshuffled on every pass.
#[derive(Clone, Debug)]
pub struct PairedBatches {
    batch_size: usize,
    source: Cycler,
    target: Cycler,
    rng: SeededRng,
}

impl PairedBatches {
    pub fn new(source_len: usize, target_len: usize, batch_size: usize, rng: SeededRng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if source_len == 0 || target_len == 0 {
            return Err(Error::input("paired batches need two nonempty corpora"));
        }
        if batch_size > source_len.min(target_len) {
            return Err(Error::config(
                "batch_size",
                format!("{batch_size} exceeds the smaller corpus ({} examples)", source_len.min(target_len)),
            ));
        }
        Ok(PairedBatches {
            batch_size,
            source: Cycler::new(source_len),
            target: Cycler::new(target_len),
            rng,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.source.n.max(self.target.n).div_ceil(self.batch_size)
    }

    pub fn next_epoch(&mut self) -> Vec<BatchPair> {
        let total = self.source.n.max(self.target.n);
        (0..self.steps_per_epoch())
            .map(|s| {
                let k = self.batch_size.min(total - s * self.batch_size);
                BatchPair {
                    source: self.source.take(k, &mut self.rng),
                    target: self.target.take(k, &mut self.rng),
                }
            })
            .collect()
    }
}

pub fn paired_batches(
    source: &Corpus,
    target: &UnlabeledCorpus,
    batch_size: usize,
    rng: SeededRng,
) -> Result<PairedBatches> {
    source.labels("paired_batches")?;
    PairedBatches::new(source.len(), target.len(), batch_size, rng)
}
