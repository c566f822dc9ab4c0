use std::sync::Arc;

use crate::dynamics::{Action, Observation};
use crate::ensemble::ChunkBuffer;
use crate::error::Result;
use crate::eval::Controller;

use super::ActPolicy;

/// Bookkeeping over every ensembling call a controller made.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnsembleStats {
    pub calls: usize,
    /// Largest `|Σ w − 1|` seen.
    pub max_weight_sum_error: f64,
    /// Calls whose output left the componentwise hull of its predictions.
    pub hull_violations: usize,
}

impl EnsembleStats {
    pub fn merge(&mut self, other: &EnsembleStats) {
        self.calls += other.calls;
        self.max_weight_sum_error = self.max_weight_sum_error.max(other.max_weight_sum_error);
        self.hull_violations += other.hull_violations;
    }
}

/// Closed-loop executor: one chunk per step with `z = 0`, blended by a
/// [`ChunkBuffer`].
#[derive(Debug, Clone)]
pub struct ActController {
    policy: Arc<ActPolicy>,
    buffer: ChunkBuffer,
    pub stats: EnsembleStats,
    tag: String,
}

impl ActController {
    pub fn new(policy: Arc<ActPolicy>, decay: f64) -> Result<Self> {
        let buffer = ChunkBuffer::new(policy.config().k, decay)?;
        Ok(Self { policy, buffer, stats: EnsembleStats::default(), tag: "act".into() })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }
}

impl Controller for ActController {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn needs_image(&self) -> bool {
        true
    }

    fn reset(&mut self) {
        self.buffer.clear();
    }

    fn act(&mut self, step: usize, obs: &Observation) -> Result<Action> {
        let chunk = self.policy.infer(obs)?;
        self.buffer.push(chunk, step)?;
        let e = self.buffer.ensemble(step)?;
        self.stats.calls += 1;
        let err = (e.weights.iter().sum::<f64>() - 1.0).abs();
        self.stats.max_weight_sum_error = self.stats.max_weight_sum_error.max(err);
        let a = e.action.to_array();
        let outside = (0..a.len()).any(|d| {
            let lo = e.predictions.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
            let hi = e.predictions.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
            a[d] < lo || a[d] > hi
        });
        if outside {
            self.stats.hull_violations += 1;
        }
        Ok(e.action)
    }
}
