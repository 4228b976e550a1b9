//! Debiased mini-batch ELBO and its reparameterized gradient.
//!
//! For a batch `B` with `S` posterior draws `θ⁽ˢ⁾`:
//!
//! ```text
//! L_B = N / (|B| S) Σ_s Σ_{i∈B} log p(y_i | x_i, θ⁽ˢ⁾)
//!     − Σ_g (K_g / Σ_{k∈F(B)∩g} α_k) Σ_{k∈F(B)∩g} α_k KL_k
//!     − KL(q(w0) ‖ p(w0))
//! ```
//!
//! where `α_k = N_k^B / N_k`, `K_g` counts the features of group `g` that
//! occur in the training set and `KL_k` covers `w_k` and every `v_kf`. When
//! the batch is the whole training set all weights are one and `L_B` is the
//! plain ELBO.

use serde::{Deserialize, Serialize};

use crate::data::{SparseInstance, Task};
use crate::fm::{log_sigmoid, sigmoid};
use crate::noise::NoiseSource;
use crate::params::{
    softplus_grad, VariationalParams, GLOBAL_MU, GLOBAL_PRIOR_MEAN, GLOBAL_PRIOR_PREC, GLOBAL_RHO, NOISE_PREC,
};
use crate::{Error, Result};

/// `KL(N(μ, σ²) ‖ N(ν, 1/λ))`.
pub fn kl_gaussian(q_mean: f64, q_scale: f64, p_mean: f64, p_precision: f64) -> Result<f64> {
    if !(q_scale > 0.0) || !(p_precision > 0.0) {
        return Err(Error::invalid(format!(
            "KL needs positive scale and precision, got σ = {q_scale}, λ = {p_precision}"
        )));
    }
    Ok(kl(q_mean, q_scale, p_mean, p_precision))
}

#[inline]
pub(crate) fn kl(mu: f64, sigma: f64, nu: f64, lambda: f64) -> f64 {
    let var = sigma * sigma;
    let diff = mu - nu;
    0.5 * (lambda * var + lambda * diff * diff - 1.0 - (lambda * var).ln())
}

/// How per-feature KL terms are rescaled on a mini-batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlWeighting {
    /// `K_g / Σ α_k` computed separately within each feature group.
    #[default]
    PerGroup,
    /// One `K / Σ α_k` over all groups.
    Global,
}

const NO_SLOT: u32 = u32::MAX;

/// Occurrence statistics of one batch relative to the training set.
#[derive(Debug, Clone)]
pub struct BatchStats {
    active: Vec<usize>,
    slot_of: Vec<u32>,
    batch_counts: Vec<usize>,
    weights: Vec<f64>,
    group_of_slot: Vec<usize>,
    group_weight_sum: Vec<f64>,
    group_size: Vec<usize>,
    batch_len: usize,
    num_train: usize,
}

impl BatchStats {
    /// `train_counts` are the `N_k` of the full training set, which has
    /// `num_train` instances.
    pub fn new(
        batch: &[&SparseInstance],
        train_counts: &[usize],
        num_train: usize,
        group_of: &[usize],
        num_groups: usize,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if train_counts.len() != group_of.len() {
            return Err(Error::Dimension(format!(
                "{} feature counts for {} features",
                train_counts.len(),
                group_of.len()
            )));
        }
        let num_features = train_counts.len();
        let mut in_batch = vec![0usize; num_features];
        for x in batch {
            for &(k, _) in x.entries() {
                if k >= num_features {
                    return Err(Error::FeatureOutOfRange { index: k, num_features });
                }
                in_batch[k] += 1;
            }
        }
        let mut group_size = vec![0; num_groups];
        for (k, &n) in train_counts.iter().enumerate() {
            if n > 0 {
                group_size[group_of[k]] += 1;
            }
        }
        let mut active = Vec::new();
        let mut slot_of = vec![NO_SLOT; num_features];
        let mut batch_counts = Vec::new();
        let mut weights = Vec::new();
        let mut group_of_slot = Vec::new();
        let mut group_weight_sum = vec![0.0; num_groups];
        for (k, &nb) in in_batch.iter().enumerate() {
            if nb == 0 {
                continue;
            }
            let n = train_counts[k];
            if n < nb {
                return Err(Error::invalid(format!(
                    "feature {k} occurs {nb} times in the batch but {n} times in the training set"
                )));
            }
            slot_of[k] = active.len() as u32;
            active.push(k);
            batch_counts.push(nb);
            let w = nb as f64 / n as f64;
            weights.push(w);
            group_of_slot.push(group_of[k]);
            group_weight_sum[group_of[k]] += w;
        }
        if active.is_empty() {
            tracing::warn!("batch has no active features; the KL term is zero");
        }
        Ok(BatchStats {
            active,
            slot_of,
            batch_counts,
            weights,
            group_of_slot,
            group_weight_sum,
            group_size,
            batch_len: batch.len(),
            num_train,
        })
    }

    /// `F(B)` in ascending order.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.slot_of[k] != NO_SLOT
    }

    /// `N_k^B` for each active feature, aligned with [`Self::active`].
    pub fn batch_counts(&self) -> &[usize] {
        &self.batch_counts
    }

    /// `α_k` for each active feature, aligned with [`Self::active`].
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn group_weight_sums(&self) -> &[f64] {
        &self.group_weight_sum
    }

    /// `K_g`: features of each group that occur in the training set.
    pub fn group_sizes(&self) -> &[usize] {
        &self.group_size
    }

    pub fn batch_len(&self) -> usize {
        self.batch_len
    }

    pub fn num_train(&self) -> usize {
        self.num_train
    }

    /// Multiplier applied to `KL_k` for each active feature.
    pub fn kl_scales(&self, weighting: KlWeighting) -> Vec<f64> {
        let total_size: usize = self.group_size.iter().sum();
        let total_weight: f64 = self.group_weight_sum.iter().sum();
        self.weights
            .iter()
            .zip(&self.group_of_slot)
            .map(|(&w, &g)| match weighting {
                KlWeighting::PerGroup => self.group_size[g] as f64 / self.group_weight_sum[g] * w,
                KlWeighting::Global => total_size as f64 / total_weight * w,
            })
            .collect()
    }
}

/// The ε values behind `S` reparameterized draws.
///
/// The global bias gets one ε shared by all draws; every active feature gets
/// `1 + d` fresh values per draw, laid out `[sample][slot][bias, v_1..v_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub global: f64,
    pub samples: usize,
    pub eps: Vec<f64>,
}

impl Draws {
    pub fn sample(stats: &BatchStats, samples: usize, dim: usize, noise: &mut impl NoiseSource) -> Self {
        let global = noise.next_eps();
        let eps = (0..samples * stats.active.len() * (dim + 1))
            .map(|_| noise.next_eps())
            .collect();
        Draws { global, samples, eps }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub value: f64,
    /// Rescaled likelihood term `N / (|B| S) Σ log p`.
    pub log_likelihood: f64,
    /// Rescaled feature KL.
    pub kl_features: f64,
    pub kl_global: f64,
}

/// Dense gradient plus the offsets it is defined on.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub touched: Vec<usize>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.touched
            .iter()
            .map(|&o| self.values[o] * self.values[o])
            .sum::<f64>()
            .sqrt()
    }
}

/// Log-likelihood of `label` given raw score `y` and its derivative in `y`.
#[inline]
pub fn log_likelihood(y: f64, label: f64, task: Task, noise_precision: f64) -> (f64, f64) {
    match task {
        Task::Regression => {
            let err = label - y;
            let ll = 0.5 * (noise_precision / std::f64::consts::TAU).ln() - 0.5 * noise_precision * err * err;
            (ll, noise_precision * err)
        }
        Task::Classification => {
            let ll = if label > 0.5 { log_sigmoid(y) } else { log_sigmoid(-y) };
            (ll, label - sigmoid(y))
        }
    }
}

/// Everything the objective needs besides the parameters.
pub struct Objective<'a> {
    pub batch: &'a [&'a SparseInstance],
    pub stats: &'a BatchStats,
    pub task: Task,
    pub weighting: KlWeighting,
}

impl Objective<'_> {
    pub fn value(&self, vp: &VariationalParams, draws: &Draws) -> ElboTerms {
        self.evaluate(vp, draws, None)
    }

    pub fn value_and_gradient(&self, vp: &VariationalParams, draws: &Draws) -> (ElboTerms, Gradient) {
        let mut grad = vec![0.0; vp.values.len()];
        let terms = self.evaluate(vp, draws, Some(&mut grad));
        let l = vp.layout();
        let mut touched: Vec<usize> = (0..5).collect();
        for &k in &self.stats.active {
            touched.push(l.bias_mu(k));
            touched.push(l.bias_rho(k));
            for f in 0..l.dim {
                touched.push(l.embed_mu(k, f));
                touched.push(l.embed_rho(k, f));
            }
        }
        touched.extend(l.feature_block().end..l.len());
        (terms, Gradient { values: grad, touched })
    }

    fn evaluate(&self, vp: &VariationalParams, draws: &Draws, mut grad: Option<&mut Vec<f64>>) -> ElboTerms {
        let l = *vp.layout();
        let d = l.dim;
        let stride = d + 1;
        let stats = self.stats;
        let n_active = stats.active.len();
        let samples = draws.samples.max(1);
        assert_eq!(
            draws.eps.len(),
            draws.samples * n_active * stride,
            "draws do not match batch"
        );
        let scale = stats.num_train as f64 / (stats.batch_len as f64 * samples as f64);
        let alpha = vp.noise_precision();

        let (mu0, s0) = vp.global_bias();
        let w0 = mu0 + draws.global * s0;

        let mut theta = vec![0.0; n_active * stride];
        let mut g_theta = vec![0.0; n_active * stride];
        let mut q = vec![0.0; d];
        let mut ll_sum = 0.0;
        let mut g_w0 = 0.0;
        let mut g_alpha = 0.0;

        for s in 0..draws.samples {
            let eps = &draws.eps[s * n_active * stride..(s + 1) * n_active * stride];
            for (slot, &k) in stats.active.iter().enumerate() {
                let (mu, sd) = vp.bias(k);
                theta[slot * stride] = mu + eps[slot * stride] * sd;
                for f in 0..d {
                    let (mu, sd) = vp.embedding(k, f);
                    theta[slot * stride + 1 + f] = mu + eps[slot * stride + 1 + f] * sd;
                }
            }
            g_theta.fill(0.0);

            for x in self.batch {
                let entries = x.entries();
                let mut y = w0;
                q.fill(0.0);
                let mut sq = 0.0;
                for &(k, xv) in entries {
                    let base = stats.slot_of[k] as usize * stride;
                    y += theta[base] * xv;
                    for f in 0..d {
                        let t = theta[base + 1 + f] * xv;
                        q[f] += t;
                        sq += t * t;
                    }
                }
                y += 0.5 * (q.iter().map(|v| v * v).sum::<f64>() - sq);
                let (ll, dy) = log_likelihood(y, x.label, self.task, alpha);
                ll_sum += ll;
                if grad.is_some() {
                    let gy = scale * dy;
                    g_w0 += gy;
                    for &(k, xv) in entries {
                        let base = stats.slot_of[k] as usize * stride;
                        g_theta[base] += gy * xv;
                        for f in 0..d {
                            g_theta[base + 1 + f] += gy * xv * (q[f] - theta[base + 1 + f] * xv);
                        }
                    }
                    if self.task == Task::Regression {
                        let err = x.label - y;
                        g_alpha += scale * (0.5 / alpha - 0.5 * err * err);
                    }
                }
            }

            if let Some(g) = grad.as_mut() {
                for (slot, &k) in stats.active.iter().enumerate() {
                    let base = slot * stride;
                    let (mu_o, rho_o) = (l.bias_mu(k), l.bias_rho(k));
                    g[mu_o] += g_theta[base];
                    g[rho_o] += g_theta[base] * eps[base] * softplus_grad(vp.get(rho_o));
                    for f in 0..d {
                        let (mu_o, rho_o) = (l.embed_mu(k, f), l.embed_rho(k, f));
                        let gt = g_theta[base + 1 + f];
                        g[mu_o] += gt;
                        g[rho_o] += gt * eps[base + 1 + f] * softplus_grad(vp.get(rho_o));
                    }
                }
            }
        }
        let log_likelihood = scale * ll_sum;

        if let Some(g) = grad.as_mut() {
            g[GLOBAL_MU] += g_w0;
            g[GLOBAL_RHO] += g_w0 * draws.global * softplus_grad(vp.get(GLOBAL_RHO));
            g[NOISE_PREC] += g_alpha * softplus_grad(vp.get(NOISE_PREC));
        }

        // KL of active features; gradients flow to μ, ρ and the group prior.
        let kl_scales = stats.kl_scales(self.weighting);
        let mut kl_features = 0.0;
        for (slot, &k) in stats.active.iter().enumerate() {
            let c = kl_scales[slot];
            let group = vp.group_of(k);
            let mut term = |mu_o: usize, rho_o: usize, nu_o: usize, lam_o: usize, g: Option<&mut Vec<f64>>| {
                let (mu, rho, nu, lam_raw) = (vp.get(mu_o), vp.get(rho_o), vp.get(nu_o), vp.get(lam_o));
                let sigma = vp.positive(rho_o);
                let lambda = vp.positive(lam_o);
                kl_features += c * kl(mu, sigma, nu, lambda);
                if let Some(g) = g {
                    let diff = mu - nu;
                    g[mu_o] -= c * lambda * diff;
                    g[rho_o] -= c * (lambda * sigma - 1.0 / sigma) * softplus_grad(rho);
                    g[nu_o] += c * lambda * diff;
                    g[lam_o] -= c * 0.5 * (sigma * sigma + diff * diff - 1.0 / lambda) * softplus_grad(lam_raw);
                }
            };
            term(
                l.bias_mu(k),
                l.bias_rho(k),
                l.prior_bias_mean(group),
                l.prior_bias_prec(group),
                grad.as_deref_mut(),
            );
            for f in 0..d {
                term(
                    l.embed_mu(k, f),
                    l.embed_rho(k, f),
                    l.prior_embed_mean(group, f),
                    l.prior_embed_prec(group, f),
                    grad.as_deref_mut(),
                );
            }
        }

        let (nu0, lambda0) = vp.global_prior();
        let kl_global = kl(mu0, s0, nu0, lambda0);
        if let Some(g) = grad.as_mut() {
            let diff = mu0 - nu0;
            g[GLOBAL_MU] -= lambda0 * diff;
            g[GLOBAL_RHO] -= (lambda0 * s0 - 1.0 / s0) * softplus_grad(vp.get(GLOBAL_RHO));
            g[GLOBAL_PRIOR_MEAN] += lambda0 * diff;
            g[GLOBAL_PRIOR_PREC] -=
                0.5 * (s0 * s0 + diff * diff - 1.0 / lambda0) * softplus_grad(vp.get(GLOBAL_PRIOR_PREC));
        }

        ElboTerms {
            value: log_likelihood - kl_features - kl_global,
            log_likelihood,
            kl_features,
            kl_global,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpace;
    use crate::noise::GaussianNoise;
    use crate::seed;

    #[test]
    fn kl_values() {
        assert_eq!(kl_gaussian(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((kl_gaussian(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_gaussian(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(kl_gaussian(0.0, 1.0, 0.0, -1.0).is_err());
    }

    fn toy() -> (Vec<SparseInstance>, Vec<usize>, Vec<usize>) {
        let xs = vec![
            SparseInstance::one_hot(&[0, 2], 1.0).unwrap(),
            SparseInstance::one_hot(&[1, 2], 0.0).unwrap(),
            SparseInstance::one_hot(&[1, 3], 1.0).unwrap(),
        ];
        // feature 4 never occurs
        (xs, vec![1, 2, 2, 1, 0], vec![0, 0, 1, 1, 1])
    }

    #[test]
    fn full_batch_weights_are_one() {
        let (xs, counts, groups) = toy();
        let batch: Vec<_> = xs.iter().collect();
        let stats = BatchStats::new(&batch, &counts, 3, &groups, 2).unwrap();
        assert_eq!(stats.active(), &[0, 1, 2, 3]);
        assert!(stats.weights().iter().all(|&w| w == 1.0));
        assert_eq!(stats.group_sizes(), &[2, 2]);
        assert!(stats.kl_scales(KlWeighting::PerGroup).iter().all(|&c| c == 1.0));
        assert!(stats.kl_scales(KlWeighting::Global).iter().all(|&c| c == 1.0));
    }

    #[test]
    fn minibatch_weights() {
        let (xs, counts, groups) = toy();
        let batch = vec![&xs[1]];
        let stats = BatchStats::new(&batch, &counts, 3, &groups, 2).unwrap();
        assert_eq!(stats.active(), &[1, 2]);
        assert_eq!(stats.weights(), &[0.5, 0.5]);
        assert!(!stats.is_active(0));
        // each group: K_g = 2, Σα = 0.5 → scale 2 · 0.5 = 2
        assert_eq!(stats.kl_scales(KlWeighting::PerGroup), vec![2.0, 2.0]);
        // global: K = 4, Σα = 1 → 4 · 0.5
        assert_eq!(stats.kl_scales(KlWeighting::Global), vec![2.0, 2.0]);
    }

    #[test]
    fn inconsistent_stats() {
        let (xs, mut counts, groups) = toy();
        counts[2] = 1;
        let batch: Vec<_> = xs.iter().collect();
        assert!(BatchStats::new(&batch, &counts, 3, &groups, 2).is_err());
        assert!(BatchStats::new(&[], &counts, 3, &groups, 2).is_err());
    }

    #[test]
    fn inactive_features_get_zero_gradient() {
        let (xs, counts, groups) = toy();
        let space = FeatureSpace::from_sizes([("a", 2), ("b", 3)]);
        let vp = VariationalParams::initialize(&space, 2, &Default::default(), 0);
        let batch = vec![&xs[0]];
        let stats = BatchStats::new(&batch, &counts, 3, &groups, 2).unwrap();
        let draws = Draws::sample(&stats, 2, 2, &mut GaussianNoise(seed::rng(0, "t")));
        let obj = Objective {
            batch: &batch,
            stats: &stats,
            task: Task::Classification,
            weighting: KlWeighting::PerGroup,
        };
        let (_, g) = obj.value_and_gradient(&vp, &draws);
        let l = vp.layout();
        for k in [1, 3, 4] {
            assert_eq!(g.values[l.bias_mu(k)], 0.0);
            assert_eq!(g.values[l.bias_rho(k)], 0.0);
            for f in 0..2 {
                assert_eq!(g.values[l.embed_mu(k, f)], 0.0);
                assert_eq!(g.values[l.embed_rho(k, f)], 0.0);
            }
            assert!(!g.touched.contains(&l.bias_mu(k)));
        }
        assert_ne!(g.values[l.bias_mu(0)], 0.0);
    }
}
