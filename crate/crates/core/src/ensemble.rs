//! Temporal ensembling of overlapping action chunks.
//!
//! Every step the policy emits a chunk predicting the next `k` actions. The
//! executed action for step `t` is a weighted average of what each buffered
//! chunk predicted for `t`, with weight `exp(-m·i)` for the `i`-th most recent
//! covering chunk (so the newest prediction weighs most).

use std::collections::VecDeque;

use crate::dynamics::{Action, ACTION_DIM};
use crate::error::{Error, Result};

/// `k` consecutive actions with a validity mask (invalid rows are padding).
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub actions: Vec<Action>,
    pub valid: Vec<bool>,
}

impl Chunk {
    pub fn new(actions: Vec<Action>) -> Self {
        let valid = vec![true; actions.len()];
        Self { actions, valid }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Result of one ensembling call, with the terms that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensembled {
    pub action: Action,
    /// Normalised weights, newest covering chunk first.
    pub weights: Vec<f64>,
    pub predictions: Vec<[f64; ACTION_DIM]>,
}

#[derive(Debug, Clone)]
pub struct ChunkBuffer {
    k: usize,
    decay: f64,
    /// `(emission step, chunk)`, newest first.
    entries: VecDeque<(usize, Chunk)>,
}

impl ChunkBuffer {
    pub fn new(k: usize, decay: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("ensemble.k", "chunk size must be >= 1"));
        }
        if !(decay >= 0.0) || !decay.is_finite() {
            return Err(Error::config("eval.ensemble_decay", format!("must be finite and >= 0, got {decay}")));
        }
        Ok(Self { k, decay, entries: VecDeque::with_capacity(k) })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// `i`-th most recent entry.
    pub fn get(&self, i: usize) -> Option<(usize, &Chunk)> {
        self.entries.get(i).map(|(s, c)| (*s, c))
    }

    /// Insert a chunk emitted at `step` as the newest entry and drop entries
    /// that no longer cover `step` or exceed the capacity `k`.
    pub fn push(&mut self, chunk: Chunk, step: usize) -> Result<()> {
        if chunk.len() != self.k || chunk.valid.len() != self.k {
            return Err(Error::Usage(format!("chunk has {} rows, buffer expects {}", chunk.len(), self.k)));
        }
        if let Some(&(newest, _)) = self.entries.front() {
            if step < newest {
                return Err(Error::Usage(format!("chunk step {step} precedes newest buffered step {newest}")));
            }
        }
        self.entries.push_front((step, chunk));
        let k = self.k;
        self.entries.retain(|(s, _)| s + k > step);
        self.entries.truncate(k);
        Ok(())
    }

    /// Weighted average of the buffered predictions for step `t`, with
    /// weights renormalised over the chunks that cover `t`.
    pub fn ensemble(&self, t: usize) -> Result<Ensembled> {
        if self.entries.is_empty() {
            return Err(Error::Usage("ensemble called on an empty buffer".into()));
        }
        let predictions: Vec<[f64; ACTION_DIM]> = self
            .entries
            .iter()
            .filter_map(|(s, c)| {
                let j = t.checked_sub(*s)?;
                (j < self.k && c.valid[j]).then(|| c.actions[j].to_array())
            })
            .collect();
        if predictions.is_empty() {
            return Err(Error::Usage(format!("no buffered chunk predicts step {t}")));
        }
        let raw: Vec<f64> = (0..predictions.len()).map(|i| (-self.decay * i as f64).exp()).collect();
        let z: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / z).collect();
        let mut out = [0.0; ACTION_DIM];
        for (d, o) in out.iter_mut().enumerate() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut acc = 0.0;
            for (w, p) in raw.iter().zip(&predictions) {
                acc += w * p[d];
                lo = lo.min(p[d]);
                hi = hi.max(p[d]);
            }
            // Rounding can push a convex combination one ulp past its
            // extremes; clamp to keep it inside the hull.
            *o = (acc / z).clamp(lo, hi);
        }
        Ok(Ensembled { action: Action::from_slice(&out), weights, predictions })
    }
}
