use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::EpisodeRef;

pub const DEFAULT_SPLIT: f64 = 0.5;
pub const DEFAULT_BATCH_SIZE: usize = 128;

/// Which of the two sampler inputs an item came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchItem {
    pub source: Source,
    pub episode_id: String,
    pub transition_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEpisode {
    pub episode_id: String,
    pub transitions: u64,
}

impl From<&EpisodeRef> for SourceEpisode {
    fn from(e: &EpisodeRef) -> Self {
        Self {
            episode_id: e.meta.episode_id.clone(),
            transitions: e.transitions,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("source {0:?} has no transitions")]
    EmptySource(Source),
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("split must lie in [0, 1], got {0}")]
    InvalidSplit(f64),
}

#[derive(Debug, Clone)]
struct Pool {
    episodes: Vec<SourceEpisode>,
    /// `ends[i]` is the exclusive global index where episode `i` ends.
    ends: Vec<u64>,
}

impl Pool {
    fn new(episodes: Vec<SourceEpisode>, source: Source) -> Result<Self, SamplerError> {
        let mut total = 0u64;
        let ends = episodes
            .iter()
            .map(|e| {
                total += e.transitions;
                total
            })
            .collect();
        if total == 0 {
            return Err(SamplerError::EmptySource(source));
        }
        Ok(Self { episodes, ends })
    }

    fn total(&self) -> u64 {
        *self.ends.last().expect("pool is non-empty")
    }

    fn draw(&self, rng: &mut ChaCha8Rng, source: Source) -> BatchItem {
        let g = rng.random_range(0..self.total());
        let i = self.ends.partition_point(|&end| end <= g);
        let start = if i == 0 { 0 } else { self.ends[i - 1] };
        BatchItem {
            source,
            episode_id: self.episodes[i].episode_id.clone(),
            transition_index: g - start,
        }
    }
}

/// Co-training batch sampler with an exact per-batch split.
///
/// Every batch holds exactly `round(split × batch_size)` items from source A
/// and the rest from source B. Within a source every transition is equally
/// likely, regardless of which episode it belongs to.
#[derive(Debug, Clone)]
pub struct CotrainSampler {
    a: Pool,
    b: Pool,
    batch_size: usize,
    split: f64,
    rng: ChaCha8Rng,
}

impl CotrainSampler {
    pub fn new(
        a: Vec<SourceEpisode>,
        b: Vec<SourceEpisode>,
        batch_size: usize,
        split: f64,
        seed: u64,
    ) -> Result<Self, SamplerError> {
        if batch_size < 2 {
            return Err(SamplerError::BatchTooSmall(batch_size));
        }
        if !(0.0..=1.0).contains(&split) {
            return Err(SamplerError::InvalidSplit(split));
        }
        Ok(Self {
            a: Pool::new(a, Source::A)?,
            b: Pool::new(b, Source::B)?,
            batch_size,
            split,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Items per batch drawn from source A.
    pub fn count_a(&self) -> usize {
        (self.split * self.batch_size as f64).round() as usize
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn total_transitions(&self, source: Source) -> u64 {
        match source {
            Source::A => self.a.total(),
            Source::B => self.b.total(),
        }
    }

    /// An independent copy for a parallel consumer; each `worker` gets its own stream.
    pub fn for_worker(&self, worker: u64) -> Self {
        let mut s = self.clone();
        s.rng.set_stream(worker + 1);
        s
    }

    pub fn sample_batch(&mut self) -> Vec<BatchItem> {
        let na = self.count_a();
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..na {
            batch.push(self.a.draw(&mut self.rng, Source::A));
        }
        for _ in na..self.batch_size {
            batch.push(self.b.draw(&mut self.rng, Source::B));
        }
        batch.shuffle(&mut self.rng);
        batch
    }
}

impl Iterator for CotrainSampler {
    type Item = Vec<BatchItem>;

    fn next(&mut self) -> Option<Vec<BatchItem>> {
        Some(self.sample_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(sizes: &[u64]) -> Vec<SourceEpisode> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| SourceEpisode {
                episode_id: format!("e{i}"),
                transitions: n,
            })
            .collect()
    }

    #[test]
    fn exact_split() {
        let mut s = CotrainSampler::new(src(&[3, 5]), src(&[7]), 128, 0.5, 1).unwrap();
        for _ in 0..50 {
            let b = s.sample_batch();
            assert_eq!(b.iter().filter(|i| i.source == Source::A).count(), 64);
            assert_eq!(b.len(), 128);
        }
        let mut s = CotrainSampler::new(src(&[1]), src(&[1]), 2, 0.5, 1).unwrap();
        let b = s.sample_batch();
        assert_eq!(b.iter().filter(|i| i.source == Source::A).count(), 1);
    }

    #[test]
    fn indices_stay_in_range() {
        let mut s = CotrainSampler::new(src(&[3, 0, 5]), src(&[7]), 64, 0.25, 9).unwrap();
        for item in s.by_ref().take(100).flatten() {
            let n = match (item.source, item.episode_id.as_str()) {
                (Source::A, "e0") => 3,
                (Source::A, "e2") => 5,
                (Source::B, "e0") => 7,
                other => panic!("unexpected {other:?}"),
            };
            assert!(item.transition_index < n);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(
            CotrainSampler::new(src(&[]), src(&[1]), 8, 0.5, 0).unwrap_err(),
            SamplerError::EmptySource(Source::A)
        );
        assert_eq!(
            CotrainSampler::new(src(&[1]), src(&[0]), 8, 0.5, 0).unwrap_err(),
            SamplerError::EmptySource(Source::B)
        );
        assert_eq!(
            CotrainSampler::new(src(&[1]), src(&[1]), 1, 0.5, 0).unwrap_err(),
            SamplerError::BatchTooSmall(1)
        );
        assert!(CotrainSampler::new(src(&[1]), src(&[1]), 4, 1.5, 0).is_err());
    }

    #[test]
    fn deterministic_and_partitioned() {
        let s = CotrainSampler::new(src(&[10]), src(&[10]), 16, 0.5, 5).unwrap();
        let (mut x, mut y) = (s.clone(), s.clone());
        assert_eq!(x.sample_batch(), y.sample_batch());
        let (mut p0, mut p1) = (s.for_worker(0), s.for_worker(1));
        assert_ne!(p0.sample_batch(), p1.sample_batch());
    }
}
