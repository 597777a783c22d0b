//! Simulated network links for latency testing.
//!
//! A [`Link`] delays each message by `base ± jitter` and never reorders:
//! a message is delivered no earlier than the one sent before it. Drops
//! apply only to messages sent as droppable (state updates).

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_ms: f64,
    /// Half-width of the uniform jitter.
    pub jitter_ms: f64,
    pub drop_rate: f64,
    pub seed: u64,
}

impl LatencyModel {
    pub const NONE: LatencyModel = LatencyModel {
        base_ms: 0.0,
        jitter_ms: 0.0,
        drop_rate: 0.0,
        seed: 0,
    };

    pub fn new(base_ms: f64, jitter_ms: f64, drop_rate: f64, seed: u64) -> Self {
        Self {
            base_ms,
            jitter_ms,
            drop_rate,
            seed,
        }
    }

    /// 50 ms fixed delay.
    pub fn lan(seed: u64) -> Self {
        Self::new(50.0, 0.0, 0.0, seed)
    }

    /// 200 ms ± 50 ms with 1% loss of state updates.
    pub fn wan(seed: u64) -> Self {
        Self::new(200.0, 50.0, 0.01, seed)
    }

    pub fn is_zero(&self) -> bool {
        self.base_ms == 0.0 && self.jitter_ms == 0.0 && self.drop_rate == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_ms.is_finite() && self.base_ms >= 0.0) {
            return Err("base delay must be a nonnegative number of milliseconds".into());
        }
        if !(self.jitter_ms.is_finite() && self.jitter_ms >= 0.0) {
            return Err("jitter must be a nonnegative number of milliseconds".into());
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err("drop rate must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Link<M> {
    model: LatencyModel,
    rng: ChaCha8Rng,
    queue: VecDeque<(f64, M)>,
    last_due: f64,
    dropped: u64,
}

impl<M> Link<M> {
    pub fn new(model: LatencyModel) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            queue: VecDeque::new(),
            last_due: f64::NEG_INFINITY,
            dropped: 0,
        }
    }

    /// Delivery time for a message sent at `now_ms`, or `None` when dropped.
    pub fn schedule(&mut self, now_ms: f64, droppable: bool) -> Option<f64> {
        let m = self.model;
        if droppable && m.drop_rate > 0.0 && self.rng.random::<f64>() < m.drop_rate {
            self.dropped += 1;
            return None;
        }
        let jitter = if m.jitter_ms > 0.0 {
            self.rng.random_range(-m.jitter_ms..=m.jitter_ms)
        } else {
            0.0
        };
        let due = (now_ms + (m.base_ms + jitter).max(0.0)).max(self.last_due);
        self.last_due = due;
        Some(due)
    }

    /// Queues `msg`; returns false if the link dropped it.
    pub fn send(&mut self, now_ms: f64, msg: M, droppable: bool) -> bool {
        match self.schedule(now_ms, droppable) {
            Some(due) => {
                self.queue.push_back((due, msg));
                true
            }
            None => false,
        }
    }

    /// Messages due by `now_ms`, in send order.
    pub fn poll(&mut self, now_ms: f64) -> Vec<M> {
        let mut out = Vec::new();
        while self.queue.front().is_some_and(|(due, _)| *due <= now_ms) {
            out.push(self.queue.pop_front().expect("front checked").1);
        }
        out
    }

    pub fn next_due(&self) -> Option<f64> {
        self.queue.front().map(|(d, _)| *d)
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}
