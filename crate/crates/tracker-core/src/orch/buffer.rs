//! Episode replay buffer.
//!
//! A bounded ring of whole episodes; training batches are fixed-length
//! subsequences drawn uniformly over (episode, offset) pairs — every
//! episode is equally likely regardless of age, and every valid offset
//! within the chosen episode is equally likely.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::world_model::{SequenceBatch, WmConfig};

use super::episode::{build_batch, Episode};
use super::OrchError;

pub struct ReplayBuffer {
    capacity: usize,
    episodes: Vec<Episode>,
    next: usize,
    pushed: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer { capacity, episodes: Vec::new(), next: 0, pushed: 0 }
    }

    pub fn push(&mut self, ep: Episode) {
        if self.episodes.len() < self.capacity {
            self.episodes.push(ep);
        } else {
            self.episodes[self.next] = ep;
        }
        self.next = (self.next + 1) % self.capacity;
        self.pushed += 1;
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Total episodes ever pushed (not capped by capacity).
    pub fn total_pushed(&self) -> usize {
        self.pushed
    }

    /// Draws a (b, l) subsequence batch, uniform over episodes and offsets.
    pub fn sample(
        &self,
        b: usize,
        l: usize,
        cfg: &WmConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<SequenceBatch, OrchError> {
        if self.episodes.is_empty() {
            return Err(OrchError::Buffer("cannot sample from an empty buffer".into()));
        }
        if let Some(short) = self.episodes.iter().find(|e| e.len < l) {
            return Err(OrchError::Buffer(format!(
                "episode of length {} shorter than requested subsequence {l}",
                short.len
            )));
        }
        let mut eps = Vec::with_capacity(b);
        let mut offsets = Vec::with_capacity(b);
        for _ in 0..b {
            let e = rng.gen_range(0..self.episodes.len());
            let ep = &self.episodes[e];
            let max_offset = ep.len - l;
            offsets.push(rng.gen_range(0..=max_offset));
            eps.push(ep);
        }
        Ok(build_batch(&eps, &offsets, l, cfg))
    }
}
