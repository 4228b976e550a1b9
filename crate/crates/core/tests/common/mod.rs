//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vfm_core::data::{Dataset, FeatureSpace, SparseInstance, Task};
use vfm_core::elbo::{BatchStats, Draws};
use vfm_core::elicitation::FrozenModel;
use vfm_core::fm::SampledParams;
use vfm_core::noise::GaussianNoise;
use vfm_core::params::{softplus_inv, VariationalParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `Σ_{k<l}` written out pair by pair.
pub fn naive_fm(p: &SampledParams, x: &SparseInstance) -> f64 {
    let e = x.entries();
    let mut y = p.global_bias;
    for &(k, v) in e {
        y += p.biases[k] * v;
    }
    for a in 0..e.len() {
        for b in a + 1..e.len() {
            let (k, xk) = e[a];
            let (l, xl) = e[b];
            let dot: f64 = (0..p.dim)
                .map(|f| p.embeddings[k * p.dim + f] * p.embeddings[l * p.dim + f])
                .sum();
            y += xk * xl * dot;
        }
    }
    y
}

/// Dense form `w0 + wᵀx + Σ_{k<l} (V Vᵀ)_{kl} x_k x_l` over all K features.
pub fn dense_fm(p: &SampledParams, x: &SparseInstance) -> f64 {
    let k = p.biases.len();
    let mut dense = vec![0.0; k];
    for &(i, v) in x.entries() {
        dense[i] = v;
    }
    let mut y = p.global_bias + (0..k).map(|i| p.biases[i] * dense[i]).sum::<f64>();
    for i in 0..k {
        for j in i + 1..k {
            let gram: f64 = (0..p.dim)
                .map(|f| p.embeddings[i * p.dim + f] * p.embeddings[j * p.dim + f])
                .sum();
            y += gram * dense[i] * dense[j];
        }
    }
    y
}

/// `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` in the textbook form.
pub fn kl_textbook(mu_q: f64, sd_q: f64, mu_p: f64, precision_p: f64) -> f64 {
    let sd_p = 1.0 / precision_p.sqrt();
    (sd_p / sd_q).ln() + (sd_q * sd_q + (mu_q - mu_p).powi(2)) / (2.0 * sd_p * sd_p) - 0.5
}

fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    -0.5 * ((x - mean) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub fn loglik(y: f64, label: f64, task: Task, alpha: f64) -> f64 {
    match task {
        Task::Regression => log_normal_pdf(label, y, 1.0 / alpha.sqrt()),
        Task::Classification => {
            let p = 1.0 / (1.0 + (-y).exp());
            if label > 0.5 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        }
    }
}

/// Debiased batch ELBO from its definition, using the same ε layout as
/// [`Draws`] (active features in ascending index order).
pub fn elbo_oracle(
    vp: &VariationalParams,
    batch: &[&SparseInstance],
    train: &Dataset,
    draws: &Draws,
    task: Task,
    per_group: bool,
) -> f64 {
    let k_total = vp.num_features();
    let d = vp.dim();
    let num_groups = train.space().num_groups();
    let counts = train.feature_counts();
    let mut in_batch = vec![0usize; k_total];
    for x in batch {
        for &(k, _) in x.entries() {
            in_batch[k] += 1;
        }
    }
    let active: Vec<usize> = (0..k_total).filter(|&k| in_batch[k] > 0).collect();
    let weight = |k: usize| in_batch[k] as f64 / counts[k] as f64;

    let (mu0, s0) = vp.global_bias();
    let w0 = mu0 + draws.global * s0;
    let mut ll = 0.0;
    for s in 0..draws.samples {
        let mut theta = SampledParams::zeros(k_total, d);
        theta.global_bias = w0;
        for (slot, &k) in active.iter().enumerate() {
            let base = (s * active.len() + slot) * (d + 1);
            let (m, sd) = vp.bias(k);
            theta.biases[k] = m + draws.eps[base] * sd;
            for f in 0..d {
                let (m, sd) = vp.embedding(k, f);
                theta.embeddings[k * d + f] = m + draws.eps[base + 1 + f] * sd;
            }
        }
        for x in batch {
            ll += loglik(naive_fm(&theta, x), x.label, task, vp.noise_precision());
        }
    }
    ll *= train.len() as f64 / (batch.len() as f64 * draws.samples as f64);

    let kl_of = |k: usize| {
        let g = vp.group_of(k);
        let (m, sd) = vp.bias(k);
        let (nu, lam) = vp.bias_prior(g);
        let mut total = kl_textbook(m, sd, nu, lam);
        for f in 0..d {
            let (m, sd) = vp.embedding(k, f);
            let (nu, lam) = vp.embedding_prior(g, f);
            total += kl_textbook(m, sd, nu, lam);
        }
        total
    };
    let mut kl = 0.0;
    if per_group {
        for g in 0..num_groups {
            let group_size = (0..k_total).filter(|&k| vp.group_of(k) == g && counts[k] > 0).count() as f64;
            let members: Vec<usize> = active.iter().copied().filter(|&k| vp.group_of(k) == g).collect();
            let wsum: f64 = members.iter().map(|&k| weight(k)).sum();
            if wsum > 0.0 {
                kl += group_size / wsum * members.iter().map(|&k| weight(k) * kl_of(k)).sum::<f64>();
            }
        }
    } else {
        let size = (0..k_total).filter(|&k| counts[k] > 0).count() as f64;
        let wsum: f64 = active.iter().map(|&k| weight(k)).sum();
        kl += size / wsum * active.iter().map(|&k| weight(k) * kl_of(k)).sum::<f64>();
    }
    let (nu0, lam0) = vp.global_prior();
    ll - kl - kl_textbook(mu0, s0, nu0, lam0)
}

/// Variational parameters with every value randomized, including priors
/// and the noise precision.
pub fn random_params(space: &FeatureSpace, dim: usize, seed: u64) -> VariationalParams {
    let mut vp = VariationalParams::initialize(space, dim, &Default::default(), seed);
    let mut r = rng(seed ^ 0xabcdef);
    for v in vp.values.iter_mut() {
        *v = 0.7 * normal(&mut r);
    }
    vp
}

/// Random one-hot user × item instances.
pub fn random_user_item(users: usize, items: usize, n: usize, task: Task, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let space = FeatureSpace::from_sizes([("user", users), ("item", items)]);
    let instances = (0..n)
        .map(|_| {
            let u = r.random_range(0..users);
            let i = r.random_range(0..items);
            let label = match task {
                Task::Regression => f64::from(r.random_range(1..=5u8)),
                Task::Classification => f64::from(r.random_range(0..=1u8)),
            };
            SparseInstance::one_hot(&[u, users + i], label).unwrap()
        })
        .collect();
    Dataset::new(instances, space, task).unwrap()
}

/// Central differences.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Fraction of positive/negative pairs ranked correctly, ties counting ½.
pub fn auc_pairs(truths: &[f64], scores: &[f64]) -> f64 {
    let (mut good, mut total) = (0.0, 0.0);
    for i in 0..truths.len() {
        for j in 0..truths.len() {
            if truths[i] > 0.5 && truths[j] <= 0.5 {
                total += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    good / total
}

/// `Σ (R_n − R_{n−1}) P_n` with one threshold per distinct score.
pub fn map_thresholds(truths: &[f64], scores: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = truths.iter().filter(|&&t| t > 0.5).count() as f64;
    let (mut prev_recall, mut total) = (0.0, 0.0);
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| truths[i] > 0.5).count() as f64;
        let recall = tp / positives;
        total += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    total
}

pub fn stats_for(batch: &[&SparseInstance], train: &Dataset) -> BatchStats {
    let space = train.space();
    BatchStats::new(
        batch,
        train.feature_counts(),
        train.len(),
        &space.group_table(),
        space.num_groups(),
    )
    .unwrap()
}

/// Instances over `users + items` features with 1–3 non-unit values each.
pub fn toy_dataset(users: usize, items: usize, n: usize, task: Task, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let space = FeatureSpace::from_sizes([("user", users), ("item", items)]);
    let k = users + items;
    let instances = (0..n)
        .map(|_| {
            let mut entries = vec![(r.random_range(0..users), r.random_range(0.5..1.5))];
            entries.push((users + r.random_range(0..items), r.random_range(0.5..1.5)));
            let extra = r.random_range(0..k);
            if !entries.iter().any(|&(j, _)| j == extra) {
                entries.push((extra, r.random_range(-1.0..1.0)));
            }
            let label = match task {
                Task::Regression => r.random_range(1.0..5.0),
                Task::Classification => f64::from(r.random_range(0..=1u8)),
            };
            SparseInstance::new(entries, label).unwrap()
        })
        .collect();
    Dataset::new(instances, space, task).unwrap()
}

pub fn random_draws(stats: &BatchStats, samples: usize, dim: usize, seed: u64) -> Draws {
    Draws::sample(stats, samples, dim, &mut GaussianNoise(rng(seed)))
}

/// Classifier over 4 users and 12 items with moderate scales.
pub fn toy_model() -> Arc<FrozenModel> {
    let space = FeatureSpace::from_sizes([("user", 4), ("item", 12)]);
    let mut vp = random_params(&space, 3, 7);
    // sensible scales and priors
    let l = *vp.layout();
    for k in 0..16 {
        vp.values[l.bias_rho(k)] = softplus_inv(0.3);
        for f in 0..3 {
            vp.values[l.embed_rho(k, f)] = softplus_inv(0.3);
        }
    }
    for f in 0..3 {
        vp.values[l.prior_embed_prec(0, f)] = softplus_inv(1.0);
    }
    Arc::new(FrozenModel::new(vp, &space, Task::Classification).unwrap())
}
