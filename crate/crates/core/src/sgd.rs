//! Pieces shared by the OCUD and MIL trainers.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Where training starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Init<P> {
    Scratch,
    WarmStart(P),
}

/// Step schedule: `lr` until `drop_at * steps`, then `lr * 0.1`.
#[derive(Debug, Clone, Copy)]
pub struct StepSchedule {
    pub lr: f64,
    pub steps: usize,
    pub drop_at: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let boundary = (self.drop_at * self.steps as f64).round() as usize;
        if step >= boundary {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// Yields image indices epoch by epoch, each epoch a fresh permutation.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub(crate) fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    /// Next index and whether it closes an epoch.
    pub(crate) fn next(&mut self) -> (usize, bool) {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        (i, self.pos == self.order.len())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
