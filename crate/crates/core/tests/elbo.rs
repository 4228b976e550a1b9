mod common;

use proptest::prelude::*;
use rand::Rng;
use vfm_core::data::{Dataset, FeatureSpace, SparseInstance, Task};
use vfm_core::elbo::{kl_gaussian, BatchStats, Draws, KlWeighting, Objective};
use vfm_core::fm::SampledParams;
use vfm_core::noise::ZeroNoise;
use vfm_core::params::VariationalParams;

use common::*;

#[test]
fn kl_examples() {
    // identical distributions
    assert_eq!(kl_gaussian(0.3, 2.0, 0.3, 0.25).unwrap(), 0.0);
    // N(1, 1) against N(0, 1): ½
    assert!((kl_gaussian(1.0, 1.0, 0.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
    // N(0, 1) against N(0, 4): ln 2 + 1/8 − ½
    let expected = 2f64.ln() + 0.125 - 0.5;
    assert!((kl_gaussian(0.0, 1.0, 0.0, 0.25).unwrap() - expected).abs() < 1e-15);
    assert!(kl_gaussian(0.0, 0.0, 0.0, 1.0).is_err());
    assert!(kl_gaussian(0.0, 1.0, 0.0, -1.0).is_err());
}

#[test]
fn kl_matches_monte_carlo() {
    let mut r = rng(11);
    for case in 0..50 {
        let mu = r.random_range(-2.0..2.0);
        let sd = r.random_range(0.2..2.0);
        let nu = r.random_range(-2.0..2.0);
        let lambda = r.random_range(0.1..5.0);
        let closed = kl_gaussian(mu, sd, nu, lambda).unwrap();
        let prior_sd = 1.0 / lambda.sqrt();
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = normal(&mut r);
            let x = mu + sd * z;
            // log q(x) − log p(x)
            let v = -0.5 * z * z - sd.ln() + 0.5 * ((x - nu) / prior_sd).powi(2) + prior_sd.ln();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - closed).abs() <= 3.0 * se,
            "case {case}: closed {closed}, monte carlo {mean} ± {se}"
        );
    }
}

#[test]
fn toy_elbo_matches_definition() {
    // 3 instances, K = 4, d = 1, ε = 0
    let space = FeatureSpace::from_sizes([("user", 2), ("item", 2)]);
    let data = Dataset::new(
        vec![
            SparseInstance::one_hot(&[0, 2], 4.0).unwrap(),
            SparseInstance::one_hot(&[1, 2], 2.0).unwrap(),
            SparseInstance::new(vec![(1, 1.0), (3, 0.5)], 3.0).unwrap(),
        ],
        space.clone(),
        Task::Regression,
    )
    .unwrap();
    let vp = random_params(&space, 1, 3);
    let all: Vec<&SparseInstance> = data.instances().iter().collect();
    for batch in [all.clone(), vec![all[0], all[2]], vec![all[1]]] {
        let stats = stats_for(&batch, &data);
        let draws = Draws::sample(&stats, 1, 1, &mut ZeroNoise);
        for weighting in [KlWeighting::PerGroup, KlWeighting::Global] {
            let objective = Objective {
                batch: &batch,
                stats: &stats,
                task: Task::Regression,
                weighting,
            };
            let got = objective.value(&vp, &draws).value;
            let want = elbo_oracle(
                &vp,
                &batch,
                &data,
                &draws,
                Task::Regression,
                weighting == KlWeighting::PerGroup,
            );
            assert!((got - want).abs() < 1e-10 * (1.0 + want.abs()), "{got} vs {want}");
        }
    }
}

#[test]
fn minibatch_elbo_matches_definition() {
    for task in [Task::Regression, Task::Classification] {
        let data = toy_dataset(4, 5, 20, task, 21);
        let vp = random_params(data.space(), 3, 5);
        let batch: Vec<&SparseInstance> = data.instances().iter().step_by(3).collect();
        let stats = stats_for(&batch, &data);
        let draws = random_draws(&stats, 3, 3, 8);
        let objective = Objective {
            batch: &batch,
            stats: &stats,
            task,
            weighting: KlWeighting::PerGroup,
        };
        let got = objective.value(&vp, &draws).value;
        let want = elbo_oracle(&vp, &batch, &data, &draws, task, true);
        assert!(
            (got - want).abs() < 1e-10 * (1.0 + want.abs()),
            "{task}: {got} vs {want}"
        );
    }
}

#[test]
fn full_batch_equals_unweighted_elbo() {
    for task in [Task::Regression, Task::Classification] {
        // 7 features, some never seen
        let data = toy_dataset(3, 4, 5, task, 2);
        let vp = random_params(data.space(), 2, 1);
        let batch: Vec<&SparseInstance> = data.instances().iter().collect();
        let stats = stats_for(&batch, &data);
        let draws = random_draws(&stats, 1, 2, 4);
        let active = stats.active().to_vec();

        let (mu0, sd0) = vp.global_bias();
        let mut theta = SampledParams::zeros(vp.num_features(), 2);
        theta.global_bias = mu0 + draws.global * sd0;
        for (slot, &k) in active.iter().enumerate() {
            let (m, sd) = vp.bias(k);
            theta.biases[k] = m + draws.eps[slot * 3] * sd;
            for f in 0..2 {
                let (m, sd) = vp.embedding(k, f);
                theta.embeddings[k * 2 + f] = m + draws.eps[slot * 3 + 1 + f] * sd;
            }
        }
        let ll: f64 = batch
            .iter()
            .map(|x| loglik(theta.predict_raw(x).unwrap(), x.label, task, vp.noise_precision()))
            .sum();
        let mut kl = 0.0;
        for &k in &active {
            let g = vp.group_of(k);
            let (m, sd) = vp.bias(k);
            let (nu, lam) = vp.bias_prior(g);
            kl += kl_gaussian(m, sd, nu, lam).unwrap();
            for f in 0..2 {
                let (m, sd) = vp.embedding(k, f);
                let (nu, lam) = vp.embedding_prior(g, f);
                kl += kl_gaussian(m, sd, nu, lam).unwrap();
            }
        }
        let (nu0, lam0) = vp.global_prior();
        let plain = ll - kl - kl_gaussian(mu0, sd0, nu0, lam0).unwrap();

        for weighting in [KlWeighting::PerGroup, KlWeighting::Global] {
            let objective = Objective {
                batch: &batch,
                stats: &stats,
                task,
                weighting,
            };
            let got = objective.value(&vp, &draws).value;
            assert!(
                (got - plain).abs() < 1e-10 * (1.0 + plain.abs()),
                "{task} {weighting:?}: {got} vs {plain}"
            );
        }
        assert!(stats.weights().iter().all(|&w| w == 1.0));
    }
}

#[test]
fn single_instance_likelihood_is_unbiased() {
    let data = random_user_item(3, 4, 10, Task::Regression, 6);
    let vp = random_params(data.space(), 2, 2);
    // one ε per feature shared by every batch
    let mut r = rng(77);
    let global = normal(&mut r);
    let table: Vec<f64> = (0..vp.num_features() * 3).map(|_| normal(&mut r)).collect();
    let draws_for = |stats: &BatchStats| Draws {
        global,
        samples: 1,
        eps: stats
            .active()
            .iter()
            .flat_map(|&k| table[k * 3..k * 3 + 3].to_vec())
            .collect(),
    };

    let mut average = 0.0;
    for x in data.instances() {
        let batch = [x];
        let stats = stats_for(&batch, &data);
        let objective = Objective {
            batch: &batch,
            stats: &stats,
            task: Task::Regression,
            weighting: KlWeighting::PerGroup,
        };
        average += objective.value(&vp, &draws_for(&stats)).log_likelihood / data.len() as f64;
    }
    let all: Vec<&SparseInstance> = data.instances().iter().collect();
    let stats = stats_for(&all, &data);
    let full = Objective {
        batch: &all,
        stats: &stats,
        task: Task::Regression,
        weighting: KlWeighting::PerGroup,
    }
    .value(&vp, &draws_for(&stats))
    .log_likelihood;
    assert!((average - full).abs() < 1e-10 * full.abs(), "{average} vs {full}");

    // a single-instance batch carries weight N
    let batch = [&data.instances()[0]];
    let stats = stats_for(&batch, &data);
    let one = Objective {
        batch: &batch,
        stats: &stats,
        task: Task::Regression,
        weighting: KlWeighting::PerGroup,
    }
    .value(&vp, &draws_for(&stats))
    .log_likelihood;
    let mut theta = vp.posterior_mean();
    theta.global_bias += global * vp.global_bias().1;
    for &k in stats.active() {
        theta.biases[k] += table[k * 3] * vp.bias(k).1;
        for f in 0..2 {
            theta.embeddings[k * 2 + f] += table[k * 3 + 1 + f] * vp.embedding(k, f).1;
        }
    }
    let x = &data.instances()[0];
    let direct = 10.0
        * loglik(
            theta.predict_raw(x).unwrap(),
            x.label,
            Task::Regression,
            vp.noise_precision(),
        );
    assert!((one - direct).abs() < 1e-10 * direct.abs());
}

/// `|a − n| / max(|a|, |n|)`, floored at 1e-6 so coordinates whose true
/// gradient is zero compare on absolute error.
fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn gradient_matches_finite_differences() {
    for task in [Task::Regression, Task::Classification] {
        // K = 6, d = 2
        let data = toy_dataset(3, 3, 12, task, 31);
        let vp = random_params(data.space(), 2, 9);
        let batch: Vec<&SparseInstance> = data.instances()[..4].iter().collect();
        let stats = stats_for(&batch, &data);
        let draws = random_draws(&stats, 2, 2, 12);
        let objective = Objective {
            batch: &batch,
            stats: &stats,
            task,
            weighting: KlWeighting::PerGroup,
        };
        let (_, grad) = objective.value_and_gradient(&vp, &draws);
        let f = |values: &[f64]| {
            let mut p = vp.clone();
            p.values.copy_from_slice(values);
            objective.value(&p, &draws).value
        };
        let mut worst: f64 = 0.0;
        for i in 0..vp.values.len() {
            let numeric = finite_difference(f, &vp.values, i, 1e-5);
            let err = relative_error(grad.values[i], numeric);
            assert!(
                err < 1e-4,
                "{task}: coordinate {i}: analytic {} numeric {numeric}",
                grad.values[i]
            );
            worst = worst.max(err);
        }
        assert!(worst < 1e-4);
    }
}

#[test]
fn inactive_features_have_zero_gradient() {
    let data = toy_dataset(3, 3, 12, Task::Regression, 31);
    let vp = random_params(data.space(), 2, 9);
    let batch = [&data.instances()[0]];
    let stats = stats_for(&batch, &data);
    let draws = random_draws(&stats, 1, 2, 1);
    let (_, grad) = Objective {
        batch: &batch,
        stats: &stats,
        task: Task::Regression,
        weighting: KlWeighting::PerGroup,
    }
    .value_and_gradient(&vp, &draws);
    let l = *vp.layout();
    let mut inactive = 0;
    for k in 0..vp.num_features() {
        if stats.is_active(k) {
            continue;
        }
        inactive += 1;
        assert_eq!(grad.values[l.bias_mu(k)], 0.0);
        assert_eq!(grad.values[l.bias_rho(k)], 0.0);
        for f in 0..2 {
            assert_eq!(grad.values[l.embed_mu(k, f)], 0.0);
            assert_eq!(grad.values[l.embed_rho(k, f)], 0.0);
        }
        assert!(!grad.touched.contains(&l.bias_mu(k)));
    }
    assert!(inactive > 0);
}

#[test]
fn two_sample_gradient_is_mean_of_single_samples() {
    let data = toy_dataset(3, 3, 12, Task::Classification, 5);
    let vp = random_params(data.space(), 2, 4);
    let batch: Vec<&SparseInstance> = data.instances()[..5].iter().collect();
    let stats = stats_for(&batch, &data);
    let a = random_draws(&stats, 1, 2, 1);
    let mut b = random_draws(&stats, 1, 2, 2);
    b.global = a.global;
    let both = Draws {
        global: a.global,
        samples: 2,
        eps: [a.eps.clone(), b.eps.clone()].concat(),
    };
    let objective = Objective {
        batch: &batch,
        stats: &stats,
        task: Task::Classification,
        weighting: KlWeighting::PerGroup,
    };
    let (_, ga) = objective.value_and_gradient(&vp, &a);
    let (_, gb) = objective.value_and_gradient(&vp, &b);
    let (_, g2) = objective.value_and_gradient(&vp, &both);
    for i in 0..vp.values.len() {
        let mean = 0.5 * (ga.values[i] + gb.values[i]);
        assert!(
            (g2.values[i] - mean).abs() < 1e-10 * (1.0 + mean.abs()),
            "coordinate {i}"
        );
    }
}

fn vp_strategy() -> impl Strategy<Value = (VariationalParams, Dataset, u64)> {
    (any::<u64>(), 0usize..2).prop_map(|(seed, t)| {
        let task = [Task::Regression, Task::Classification][t];
        let data = toy_dataset(3, 4, 8, task, seed);
        (random_params(data.space(), 2, seed), data, seed)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kl_is_nonnegative(mu in -5.0..5.0f64, sd in 0.01..10.0f64, nu in -5.0..5.0f64, lambda in 0.01..100.0f64) {
        prop_assert!(kl_gaussian(mu, sd, nu, lambda).unwrap() >= 0.0);
    }

    #[test]
    fn elbo_is_below_likelihood_term((vp, data, seed) in vp_strategy()) {
        let batch: Vec<&SparseInstance> = data.instances().iter().take(5).collect();
        let stats = stats_for(&batch, &data);
        let draws = random_draws(&stats, 2, 2, seed);
        let terms = Objective { batch: &batch, stats: &stats, task: data.task(), weighting: KlWeighting::PerGroup }
            .value(&vp, &draws);
        prop_assert!(terms.kl_features >= 0.0 && terms.kl_global >= 0.0);
        prop_assert!(terms.value <= terms.log_likelihood);
        let sum = terms.log_likelihood - terms.kl_features - terms.kl_global;
        prop_assert!((terms.value - sum).abs() <= 1e-9 * (1.0 + sum.abs()));
    }
}
