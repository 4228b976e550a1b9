//! Factorization machine prediction for one concrete parameter draw.
//!
//! `y(x) = w0 + Σ_k w_k x_k + Σ_{k<l} x_k x_l <v_k, v_l>`, evaluated in
//! `O(nnz · d)` through the identity
//! `Σ_{k<l} x_k x_l <v_k, v_l> = ½ Σ_f [(Σ_k v_kf x_k)² − Σ_k v_kf² x_k²]`.

use serde::{Deserialize, Serialize};

use crate::data::{SparseInstance, Task};
use crate::{Error, Result};

/// `θ = (w0, w, V)`; `V` is stored row-major, row `k` is `v_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledParams {
    pub global_bias: f64,
    pub biases: Vec<f64>,
    pub embeddings: Vec<f64>,
    pub dim: usize,
}

impl SampledParams {
    pub fn zeros(num_features: usize, dim: usize) -> Self {
        SampledParams {
            global_bias: 0.0,
            biases: vec![0.0; num_features],
            embeddings: vec![0.0; num_features * dim],
            dim,
        }
    }

    pub fn num_features(&self) -> usize {
        self.biases.len()
    }

    pub fn embedding(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    pub fn embedding_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    pub fn predict_raw(&self, x: &SparseInstance) -> Result<f64> {
        if self.embeddings.len() != self.biases.len() * self.dim {
            return Err(Error::Dimension(format!(
                "{} embedding values for {} features of dimension {}",
                self.embeddings.len(),
                self.biases.len(),
                self.dim
            )));
        }
        if let Some(k) = x.max_index().filter(|&k| k >= self.num_features()) {
            return Err(Error::FeatureOutOfRange {
                index: k,
                num_features: self.num_features(),
            });
        }
        Ok(score(
            self.global_bias,
            x.entries(),
            |k| self.biases[k],
            |k| self.embedding(k),
            self.dim,
        ))
    }

    pub fn predict_mean_response(&self, x: &SparseInstance, task: Task) -> Result<f64> {
        Ok(mean_response(self.predict_raw(x)?, task))
    }
}

/// Raw FM score with pluggable parameter lookup; callers check bounds.
#[inline]
pub fn score<'a>(
    global_bias: f64,
    entries: &[(usize, f64)],
    bias: impl Fn(usize) -> f64,
    embedding: impl Fn(usize) -> &'a [f64],
    dim: usize,
) -> f64 {
    let mut y = global_bias;
    for &(k, x) in entries {
        y += bias(k) * x;
    }
    for f in 0..dim {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for &(k, x) in entries {
            let t = embedding(k)[f] * x;
            sum += t;
            sum_sq += t * t;
        }
        y += 0.5 * (sum * sum - sum_sq);
    }
    y
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Identity link for regression, sigmoid for classification.
pub fn mean_response(raw: f64, task: Task) -> f64 {
    match task {
        Task::Regression => raw,
        Task::Classification => sigmoid(raw),
    }
}
