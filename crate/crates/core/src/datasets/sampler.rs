use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::EpisodeSplit;
use crate::error::{Error, Result};
use crate::seed;

/// A target-labeled draw; its augmentation is fixed by `augment_seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDraw {
    pub index: usize,
    pub augment_seed: u64,
}

/// Indices into the pools of an [`EpisodeSplit`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBatch {
    /// Zero-based position in the stream.
    pub index: u64,
    pub labeled_source: Vec<usize>,
    pub labeled_target: Vec<LabeledDraw>,
    pub unlabeled_target: Vec<usize>,
}

/// Walks a pool in shuffled passes; every element is used once per pass.
#[derive(Clone, Debug)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        Cycler {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.next()).collect()
    }
}

/// Infinite stream of balanced batches: `B/2` source, `B/2` target-labeled
/// and `U` unlabeled target samples. With an empty target-labeled pool
/// (`K = 0`) the source fills the whole batch.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    source: Cycler,
    target: Cycler,
    unlabeled: Cycler,
    augment: ChaCha8Rng,
    source_per_batch: usize,
    target_per_batch: usize,
    unlabeled_per_batch: usize,
    next_index: u64,
}

impl BalancedSampler {
    pub fn new(split: &EpisodeSplit, batch_size: usize, unlabeled: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and positive, got {batch_size}"
            )));
        }
        let (source_per_batch, target_per_batch) = if split.target_labeled.is_empty() {
            (batch_size, 0)
        } else {
            (batch_size / 2, batch_size / 2)
        };
        if source_per_batch > split.source_labeled.len() {
            return Err(Error::Config(format!(
                "{} source samples per batch but only {} available",
                source_per_batch,
                split.source_labeled.len()
            )));
        }
        Ok(BalancedSampler {
            source: Cycler::new(split.source_labeled.len(), seed::rng(seed, "sampler/source")),
            target: Cycler::new(split.target_labeled.len(), seed::rng(seed, "sampler/target")),
            unlabeled: Cycler::new(split.target_unlabeled.len(), seed::rng(seed, "sampler/unlabeled")),
            augment: seed::rng(seed, "sampler/augment"),
            source_per_batch,
            target_per_batch,
            unlabeled_per_batch: unlabeled,
            next_index: 0,
        })
    }

    /// Index of the batch the next call will return.
    pub fn position(&self) -> u64 {
        self.next_index
    }

    /// Discards `n` batches.
    pub fn fast_forward(&mut self, n: u64) {
        for _ in 0..n {
            self.next_batch();
        }
    }

    pub fn next_batch(&mut self) -> TrainingBatch {
        let labeled_source = self.source.take(self.source_per_batch);
        let labeled_target = self
            .target
            .take(self.target_per_batch)
            .into_iter()
            .map(|index| LabeledDraw {
                index,
                augment_seed: self.augment.gen(),
            })
            .collect();
        let unlabeled_target = self.unlabeled.take(self.unlabeled_per_batch);
        let index = self.next_index;
        self.next_index += 1;
        TrainingBatch {
            index,
            labeled_source,
            labeled_target,
            unlabeled_target,
        }
    }
}

impl Iterator for BalancedSampler {
    type Item = TrainingBatch;

    fn next(&mut self) -> Option<TrainingBatch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_episode, Domain, SampleRecord};

    fn split(shots: usize) -> EpisodeSplit {
        let mk = |p: &str, d| -> Vec<SampleRecord> {
            (0..100)
                .map(|i| SampleRecord::new(format!("{p}{i}"), Some(i % 2), d))
                .collect()
        };
        make_episode(&mk("s", Domain::Source), &mk("t", Domain::Target), shots, 2, 11).unwrap()
    }

    #[test]
    fn six_shots_appear_in_every_batch() {
        let s = split(3);
        for b in BalancedSampler::new(&s, 12, 12, 0).unwrap().take(100) {
            assert_eq!(b.labeled_source.len(), 6);
            let mut t: Vec<usize> = b.labeled_target.iter().map(|d| d.index).collect();
            t.sort();
            assert_eq!(t, vec![0, 1, 2, 3, 4, 5]);
            assert_eq!(b.unlabeled_target.len(), 12);
        }
    }

    #[test]
    fn minimal_batch() {
        let b = BalancedSampler::new(&split(1), 2, 0, 0).unwrap().next_batch();
        assert_eq!(
            (b.labeled_source.len(), b.labeled_target.len(), b.unlabeled_target.len()),
            (1, 1, 0)
        );
    }

    #[test]
    fn target_usage_is_even_per_cycle() {
        let s = split(5);
        let draws: Vec<usize> = BalancedSampler::new(&s, 12, 12, 3)
            .unwrap()
            .take(100)
            .flat_map(|b| b.labeled_target.into_iter().map(|d| d.index))
            .collect();
        for cycle in draws.chunks(10) {
            let mut c = cycle.to_vec();
            c.sort();
            assert_eq!(c, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn source_passes_have_no_repeats() {
        let s = split(3);
        let draws: Vec<usize> = BalancedSampler::new(&s, 12, 0, 3)
            .unwrap()
            .take(50)
            .flat_map(|b| b.labeled_source)
            .collect();
        for pass in draws.chunks(100) {
            let mut p = pass.to_vec();
            p.sort();
            p.dedup();
            assert_eq!(p.len(), pass.len());
        }
    }

    #[test]
    fn zero_shots_fill_with_source() {
        let b = BalancedSampler::new(&split(0), 12, 4, 0).unwrap().next_batch();
        assert_eq!(b.labeled_source.len(), 12);
        assert!(b.labeled_target.is_empty());
    }

    #[test]
    fn odd_batch_rejected_and_streams_repeat() {
        assert!(BalancedSampler::new(&split(3), 11, 12, 0).is_err());
        let s = split(3);
        let a: Vec<_> = BalancedSampler::new(&s, 12, 12, 8).unwrap().take(20).collect();
        let mut skipped = BalancedSampler::new(&s, 12, 12, 8).unwrap();
        skipped.fast_forward(10);
        assert_eq!(skipped.position(), 10);
        let rest: Vec<_> = skipped.take(10).collect();
        assert_eq!(rest, a[10..].to_vec());
    }
}
