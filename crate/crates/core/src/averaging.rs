//! Polyak–Ruppert averaging of posterior means.
//!
//! The running sum is kept instead of an incremental mean so the result is
//! exactly `Σ iterates / n` for a fixed recording order.

use serde::{Deserialize, Serialize};

use crate::params::VariationalParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateAverage {
    /// Sums over recorded iterates, aligned with [`crate::params::Layout::mean_offsets`].
    sums: Vec<f64>,
    count: u64,
}

impl IterateAverage {
    pub fn new(params: &VariationalParams) -> Self {
        IterateAverage {
            sums: vec![0.0; params.layout().mean_offsets().count()],
            count: 0,
        }
    }

    pub fn record(&mut self, params: &VariationalParams) {
        for (s, o) in self.sums.iter_mut().zip(params.layout().mean_offsets()) {
            *s += params.get(o);
        }
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// `last` with its posterior means replaced by their average. Scales,
    /// priors and α stay at their last values. Returns `last` unchanged when
    /// nothing has been recorded.
    pub fn apply(&self, last: &VariationalParams) -> VariationalParams {
        let mut out = last.clone();
        if self.count == 0 {
            return out;
        }
        let n = self.count as f64;
        let offsets: Vec<usize> = last.layout().mean_offsets().collect();
        for (s, o) in self.sums.iter().zip(offsets) {
            out.values[o] = s / n;
        }
        out
    }
}
