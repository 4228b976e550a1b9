//! Mean-field Gaussian posterior over FM parameters, plus the group priors.
//!
//! Every trainable scalar lives in one flat vector so the optimizer, the
//! iterate average and checkpoints can treat it uniformly. [`Layout`] maps
//! named parameters to offsets:
//!
//! | block                 | length  |
//! |-----------------------|---------|
//! | global bias μ, ρ      | 2       |
//! | global prior ν, λ     | 2       |
//! | noise precision α     | 1       |
//! | bias μ, ρ             | 2K      |
//! | embedding μ, ρ        | 2Kd     |
//! | bias prior ν, λ       | 2G      |
//! | embedding prior ν, λ  | 2Gd     |
//!
//! for a total of `2(d+1)(K+G) + 5`. Scales, precisions and α are stored
//! unconstrained and mapped through softplus.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::FeatureSpace;
use crate::fm::{sigmoid, SampledParams};
use crate::noise::NoiseSource;
use crate::{seed, Error, Result};

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus.
pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

/// Inverse of softplus on `(0, ∞)`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs a positive argument, got {y}");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub const GLOBAL_MU: usize = 0;
pub const GLOBAL_RHO: usize = 1;
pub const GLOBAL_PRIOR_MEAN: usize = 2;
pub const GLOBAL_PRIOR_PREC: usize = 3;
pub const NOISE_PREC: usize = 4;
const HEADER: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub num_features: usize,
    pub num_groups: usize,
    pub dim: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        2 * (self.dim + 1) * (self.num_features + self.num_groups) + HEADER
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn bias_mu(&self, k: usize) -> usize {
        HEADER + k
    }
    #[inline]
    pub fn bias_rho(&self, k: usize) -> usize {
        HEADER + self.num_features + k
    }
    #[inline]
    pub fn embed_mu(&self, k: usize, f: usize) -> usize {
        HEADER + 2 * self.num_features + k * self.dim + f
    }
    #[inline]
    pub fn embed_rho(&self, k: usize, f: usize) -> usize {
        HEADER + (2 + self.dim) * self.num_features + k * self.dim + f
    }

    fn priors(&self) -> usize {
        HEADER + 2 * (self.dim + 1) * self.num_features
    }
    #[inline]
    pub fn prior_bias_mean(&self, g: usize) -> usize {
        self.priors() + g
    }
    #[inline]
    pub fn prior_bias_prec(&self, g: usize) -> usize {
        self.priors() + self.num_groups + g
    }
    #[inline]
    pub fn prior_embed_mean(&self, g: usize, f: usize) -> usize {
        self.priors() + 2 * self.num_groups + g * self.dim + f
    }
    #[inline]
    pub fn prior_embed_prec(&self, g: usize, f: usize) -> usize {
        self.priors() + (2 + self.dim) * self.num_groups + g * self.dim + f
    }

    /// Offset range of all per-feature posterior parameters (μ and ρ).
    pub fn feature_block(&self) -> std::ops::Range<usize> {
        HEADER..self.priors()
    }

    /// Offsets of the posterior means: global bias, feature biases, embeddings.
    pub fn mean_offsets(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(GLOBAL_MU)
            .chain((0..self.num_features).map(|k| self.bias_mu(k)))
            .chain(self.embed_mu(0, 0)..self.embed_mu(0, 0) + self.num_features * self.dim)
    }
}

/// Initial values for a fresh posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Standard deviation of the N(0, s²) draw for every posterior mean.
    pub mean_std: f64,
    /// Initial posterior standard deviation.
    pub scale: f64,
    /// Initial prior precision λ for every group and the global bias.
    pub prior_precision: f64,
    /// Initial noise precision α.
    pub noise_precision: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            mean_std: 1.0,
            scale: 1.0,
            prior_precision: 0.02,
            noise_precision: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    layout: Layout,
    group_of: Vec<usize>,
    pub values: Vec<f64>,
}

impl VariationalParams {
    pub fn initialize(space: &FeatureSpace, dim: usize, init: &InitConfig, seed: u64) -> Self {
        let layout = Layout {
            num_features: space.num_features(),
            num_groups: space.num_groups(),
            dim,
        };
        let mut values = vec![0.0; layout.len()];
        let mut rng = seed::rng(seed, "init");
        let rho = softplus_inv(init.scale);
        let mut draw = || init.mean_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);

        values[GLOBAL_MU] = draw();
        values[GLOBAL_RHO] = rho;
        for k in 0..layout.num_features {
            values[layout.bias_mu(k)] = draw();
            values[layout.bias_rho(k)] = rho;
        }
        for k in 0..layout.num_features {
            for f in 0..dim {
                values[layout.embed_mu(k, f)] = draw();
                values[layout.embed_rho(k, f)] = rho;
            }
        }
        let prec = softplus_inv(init.prior_precision);
        values[GLOBAL_PRIOR_PREC] = prec;
        for g in 0..layout.num_groups {
            values[layout.prior_bias_prec(g)] = prec;
            for f in 0..dim {
                values[layout.prior_embed_prec(g, f)] = prec;
            }
        }
        values[NOISE_PREC] = softplus_inv(init.noise_precision);

        VariationalParams {
            layout,
            group_of: space.group_table(),
            values,
        }
    }

    pub fn from_parts(layout: Layout, group_of: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() || group_of.len() != layout.num_features {
            return Err(Error::Dimension(format!(
                "{} values and {} group ids for layout {layout:?}",
                values.len(),
                group_of.len()
            )));
        }
        if let Some(g) = group_of.iter().find(|&&g| g >= layout.num_groups) {
            return Err(Error::Dimension(format!("group id {g} >= {}", layout.num_groups)));
        }
        Ok(VariationalParams {
            layout,
            group_of,
            values,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn num_features(&self) -> usize {
        self.layout.num_features
    }

    pub fn group_of(&self, k: usize) -> usize {
        self.group_of[k]
    }

    pub fn group_table(&self) -> &[usize] {
        &self.group_of
    }

    #[inline]
    pub fn get(&self, offset: usize) -> f64 {
        self.values[offset]
    }

    /// Mapped positive value at an unconstrained offset.
    #[inline]
    pub fn positive(&self, offset: usize) -> f64 {
        softplus(self.values[offset])
    }

    pub fn noise_precision(&self) -> f64 {
        self.positive(NOISE_PREC)
    }

    /// Posterior `(mean, std)` of the global bias.
    pub fn global_bias(&self) -> (f64, f64) {
        (self.values[GLOBAL_MU], self.positive(GLOBAL_RHO))
    }

    /// Posterior `(mean, std)` of `w_k`.
    pub fn bias(&self, k: usize) -> (f64, f64) {
        (
            self.values[self.layout.bias_mu(k)],
            self.positive(self.layout.bias_rho(k)),
        )
    }

    /// Posterior `(mean, std)` of `v_kf`.
    pub fn embedding(&self, k: usize, f: usize) -> (f64, f64) {
        (
            self.values[self.layout.embed_mu(k, f)],
            self.positive(self.layout.embed_rho(k, f)),
        )
    }

    /// Prior `(mean, precision)` for biases of group `g`.
    pub fn bias_prior(&self, g: usize) -> (f64, f64) {
        (
            self.values[self.layout.prior_bias_mean(g)],
            self.positive(self.layout.prior_bias_prec(g)),
        )
    }

    /// Prior `(mean, precision)` for dimension `f` of group `g` embeddings.
    pub fn embedding_prior(&self, g: usize, f: usize) -> (f64, f64) {
        (
            self.values[self.layout.prior_embed_mean(g, f)],
            self.positive(self.layout.prior_embed_prec(g, f)),
        )
    }

    pub fn global_prior(&self) -> (f64, f64) {
        (self.values[GLOBAL_PRIOR_MEAN], self.positive(GLOBAL_PRIOR_PREC))
    }

    /// Reparameterized draw: every scalar is `μ + ε·softplus(ρ)` with a fresh ε.
    ///
    /// Noise is consumed in the order global bias, biases `0..K`, then
    /// embeddings row by row.
    pub fn sample(&self, noise: &mut impl NoiseSource) -> SampledParams {
        let l = &self.layout;
        let (mu0, s0) = self.global_bias();
        let mut out = SampledParams::zeros(l.num_features, l.dim);
        out.global_bias = mu0 + noise.next_eps() * s0;
        for k in 0..l.num_features {
            let (mu, s) = self.bias(k);
            out.biases[k] = mu + noise.next_eps() * s;
        }
        for k in 0..l.num_features {
            for f in 0..l.dim {
                let (mu, s) = self.embedding(k, f);
                out.embeddings[k * l.dim + f] = mu + noise.next_eps() * s;
            }
        }
        out
    }

    /// The posterior means, with no noise.
    pub fn posterior_mean(&self) -> SampledParams {
        let l = &self.layout;
        let base = l.embed_mu(0, 0);
        SampledParams {
            global_bias: self.values[GLOBAL_MU],
            biases: self.values[l.bias_mu(0)..l.bias_mu(0) + l.num_features].to_vec(),
            embeddings: self.values[base..base + l.num_features * l.dim].to_vec(),
            dim: l.dim,
        }
    }

    /// SHA-256 over the bit patterns of the selected offsets.
    pub fn fingerprint(&self, offsets: impl IntoIterator<Item = usize>) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for o in offsets {
            h.update(self.values[o].to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
