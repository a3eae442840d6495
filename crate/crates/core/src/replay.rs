//! Bounded FIFO replay buffer for student-generated continuations, plus
//! the replay-ratio schedules scaling the per-step generation probability.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::SeqPair;
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 1000;

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<SeqPair>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        ReplayBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total insertions over the buffer's lifetime.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Appends in order, evicting oldest entries once over capacity.
    pub fn push_batch(&mut self, pairs: impl IntoIterator<Item = SeqPair>) {
        for pair in pairs {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(pair);
            self.inserted += 1;
        }
    }

    /// Uniform draws with replacement.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SeqPair>> {
        if self.entries.is_empty() {
            return Err(Error::BufferEmpty);
        }
        Ok((0..batch_size)
            .map(|_| self.entries[rng.gen_range(0..self.entries.len())].clone())
            .collect())
    }

    pub fn entries(&self) -> impl Iterator<Item = &SeqPair> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaySchedule {
    /// zeta = 1 - t/T.
    Decreasing,
    /// zeta = 0.5.
    Constant,
    /// zeta = t/T.
    Increasing,
}

impl ReplaySchedule {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "decreasing" => Ok(ReplaySchedule::Decreasing),
            "constant" => Ok(ReplaySchedule::Constant),
            "increasing" => Ok(ReplaySchedule::Increasing),
            _ => Err(Error::InvalidArgument(format!(
                "unknown replay schedule: {tag}"
            ))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ReplaySchedule::Decreasing => "decreasing",
            ReplaySchedule::Constant => "constant",
            ReplaySchedule::Increasing => "increasing",
        }
    }
}

pub fn replay_ratio(schedule: ReplaySchedule, t: usize, total: usize) -> f64 {
    assert!(total >= 1 && t <= total);
    match schedule {
        ReplaySchedule::Decreasing => 1.0 - t as f64 / total as f64,
        ReplaySchedule::Constant => 0.5,
        ReplaySchedule::Increasing => t as f64 / total as f64,
    }
}

/// Per-step SGO generation probability lambda_R = phi * zeta.
pub fn generation_prob(phi: f64, zeta: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&phi) && (0.0..=1.0).contains(&zeta));
    phi * zeta
}
