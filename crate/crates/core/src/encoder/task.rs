//! Synthetic binary sequence task.
//!
//! The last vocabulary token is a marker placed at position `p`; the token at
//! `p + 1` is the target `t`. Filler tokens are drawn from the remaining
//! symbols excluding `t`. A positive sample repeats `t` once more at a
//! position after `p + 1`. Deciding the label needs attention from the marker
//! neighbourhood to an arbitrary later position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub n: usize,
    pub vocab: usize,
    pub seed: u64,
}

const EVAL_STREAM: u64 = 0;

impl ToyTask {
    /// Needs `n >= 4` and at least three filler symbols plus the marker.
    pub fn new(n: usize, vocab: usize, seed: u64) -> Result<Self> {
        if n < 4 {
            return Err(Error::config(format!("toy task needs n >= 4, got {n}")));
        }
        if vocab < 4 {
            return Err(Error::config(format!(
                "toy task needs vocab >= 4, got {vocab}"
            )));
        }
        Ok(ToyTask { n, vocab, seed })
    }

    pub fn marker(&self) -> usize {
        self.vocab - 1
    }

    pub fn sample(&self, rng: &mut Rng, label: usize) -> Sample {
        let n = self.n;
        let p = rng.below(n - 2);
        let target = rng.below(self.vocab - 1);
        let fillers: Vec<usize> = (0..self.vocab - 1).filter(|&x| x != target).collect();
        let mut tokens: Vec<usize> = (0..n).map(|_| fillers[rng.below(fillers.len())]).collect();
        tokens[p] = self.marker();
        tokens[p + 1] = target;
        if label == 1 {
            tokens[rng.range(p + 2, n)] = target;
        }
        Sample { tokens, label }
    }

    /// Training batch for `step`; labels alternate so every even-sized batch is balanced.
    pub fn train_batch(&self, step: usize, size: usize) -> Vec<Sample> {
        let mut rng = Rng::derive(self.seed, 1 + step as u64);
        (0..size).map(|i| self.sample(&mut rng, i % 2)).collect()
    }

    /// Held-out set drawn from a stream disjoint from training.
    pub fn eval_set(&self, size: usize) -> Vec<Sample> {
        let mut rng = Rng::derive(self.seed, EVAL_STREAM);
        (0..size).map(|i| self.sample(&mut rng, i % 2)).collect()
    }
}

/// True when the sequence contains the target token after `p + 1`.
pub fn oracle_label(task: &ToyTask, tokens: &[usize]) -> Option<usize> {
    let p = tokens.iter().position(|&t| t == task.marker())?;
    let target = *tokens.get(p + 1)?;
    Some(usize::from(tokens[p + 2..].contains(&target)))
}
