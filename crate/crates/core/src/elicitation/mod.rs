//! Preference elicitation for a user the model has never seen.
//!
//! A model trained on other users is frozen. The new user's bias and
//! embedding start at the learned user-group prior; after each batch of
//! answers only that block is re-fitted, and the next queries are picked from
//! the predictive distribution of the items not yet asked about.

mod matrix;
mod protocol;

pub use matrix::{build_movie10k, build_top_items, synthetic_preferences, PreferenceMatrix, SyntheticConfig};
pub use protocol::{
    aggregate, run_experiment, run_protocol, train_observed, write_aggregate_csv, write_rounds_csv, AggregateRow,
    ElicitationProtocol, ExperimentResult, ExperimentSplit, RoundMetrics, SeedRun,
};

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::data::{FeatureSpace, Task};
use crate::elbo::{kl, log_likelihood, Gradient};
use crate::fm::mean_response;
use crate::noise::{GaussianNoise, NoiseSource};
use crate::params::{softplus, softplus_grad, softplus_inv, VariationalParams};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "random")]
    Random,
    /// Items whose predicted probability is closest to ½.
    #[serde(rename = "mean")]
    MeanClosestHalf,
    /// Items whose raw score varies most across posterior draws.
    #[serde(rename = "variance")]
    MaxVariance,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::MeanClosestHalf, Strategy::MaxVariance];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::MeanClosestHalf => "mean",
            Strategy::MaxVariance => "variance",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Strategy::Random),
            "mean" | "mean-closest-half" => Ok(Strategy::MeanClosestHalf),
            "variance" | "max-variance" => Ok(Strategy::MaxVariance),
            _ => Err(Error::invalid(format!(
                "unknown strategy {s:?} (expected random, mean or variance)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings for re-fitting the user block after answers arrive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop after the objective decreases this many steps in a row. The
    /// noise is fixed within an update, so decreases come from Adam
    /// overshooting rather than sampling error.
    pub patience: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            learning_rate: 0.1,
            max_iterations: 2000,
            patience: 20,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub strategy: Strategy,
    /// Posterior draws per predictive estimate and per update.
    pub samples: usize,
    pub update: UpdateConfig,
    pub seed: u64,
}

impl SessionConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        SessionConfig {
            strategy,
            samples: 100,
            update: UpdateConfig::default(),
            seed,
        }
    }
}

/// A trained user–item model whose parameters never change.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    params: VariationalParams,
    task: Task,
    user_group: usize,
    item_start: usize,
    num_items: usize,
    catalog: Vec<usize>,
}

impl FrozenModel {
    /// `space` needs groups named `user` and `item`; item ids are positions
    /// within the item group.
    pub fn new(params: VariationalParams, space: &FeatureSpace, task: Task) -> Result<Self> {
        let group = |name| {
            space
                .group_by_name(name)
                .ok_or_else(|| Error::Elicitation(format!("feature space has no {name:?} group")))
        };
        let user_group = group("user")?;
        let item_group = group("item")?;
        if params.num_features() != space.num_features() || params.group_table() != space.group_table() {
            return Err(Error::Dimension("parameters do not match the feature space".into()));
        }
        let items = space.group(item_group);
        Ok(FrozenModel {
            params,
            task,
            user_group,
            item_start: items.start,
            num_items: items.len(),
            catalog: (0..items.len()).collect(),
        })
    }

    /// Restricts the items sessions may ask about or rank.
    pub fn with_catalog(mut self, mut items: Vec<usize>) -> Result<Self> {
        items.sort_unstable();
        items.dedup();
        if items.is_empty() {
            return Err(Error::Empty("item catalog"));
        }
        if let Some(&j) = items.iter().find(|&&j| j >= self.num_items) {
            return Err(Error::Elicitation(format!("item {j} outside {} items", self.num_items)));
        }
        self.catalog = items;
        Ok(self)
    }

    pub fn params(&self) -> &VariationalParams {
        &self.params
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn catalog(&self) -> &[usize] {
        &self.catalog
    }

    pub fn in_catalog(&self, item: usize) -> bool {
        self.catalog.binary_search(&item).is_ok()
    }

    pub fn item_feature(&self, item: usize) -> usize {
        self.item_start + item
    }

    /// Hash of every frozen value.
    pub fn fingerprint(&self) -> String {
        self.params.fingerprint(0..self.params.values.len())
    }

    /// `(mean, precision)` of the user-group prior for coordinate `j`
    /// (0 is the bias, `1 + f` embedding dimension `f`).
    fn prior(&self, j: usize) -> (f64, f64) {
        if j == 0 {
            self.params.bias_prior(self.user_group)
        } else {
            self.params.embedding_prior(self.user_group, j - 1)
        }
    }

    /// The learned prior as a user posterior.
    pub fn user_prior(&self) -> UserState {
        let (means, scales) = (0..=self.dim())
            .map(|j| {
                let (nu, lambda) = self.prior(j);
                (nu, 1.0 / lambda.sqrt())
            })
            .unzip();
        UserState { means, scales }
    }
}

/// Gaussian posterior of one user's bias (index 0) and embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemStats {
    pub item: usize,
    /// Mean predicted response: a probability for classification.
    pub mean: f64,
    /// Sample variance of the raw score.
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateStop {
    NoAnswers,
    Converged,
    Patience,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub iterations: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub stop: UpdateStop,
}

/// Noise for one update: per draw, ε for `w0` and the user block
/// (`[s][w0, bias, v_1..v_d]`), then ε for every revealed item
/// (`[s][answer][bias, v_1..v_d]`).
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDraws {
    pub samples: usize,
    pub shared: Vec<f64>,
    pub items: Vec<f64>,
}

/// One user's elicitation state over a frozen model.
///
/// The user block is stored unconstrained as `[μ_0..μ_d, ρ_0..ρ_d]` with
/// scale `softplus(ρ)`.
#[derive(Debug, Clone)]
pub struct ElicitationSession {
    model: Arc<FrozenModel>,
    config: SessionConfig,
    user: Vec<f64>,
    pool: Vec<usize>,
    validation: Vec<usize>,
    queried: BTreeSet<usize>,
    pending: Vec<usize>,
    revealed: Vec<(usize, f64)>,
    rounds: usize,
    updates: usize,
    trajectory: Vec<UserState>,
}

impl ElicitationSession {
    /// `pool` items may be queried; `validation` items are only scored.
    pub fn new(
        model: Arc<FrozenModel>,
        mut pool: Vec<usize>,
        mut validation: Vec<usize>,
        config: SessionConfig,
    ) -> Result<Self> {
        if config.samples == 0 {
            return Err(Error::invalid("elicitation needs at least one sample"));
        }
        pool.sort_unstable();
        pool.dedup();
        validation.sort_unstable();
        validation.dedup();
        if pool.is_empty() {
            return Err(Error::Empty("interactive pool"));
        }
        for &j in pool.iter().chain(&validation) {
            if !model.in_catalog(j) {
                return Err(Error::Elicitation(format!("item {j} is not in the catalog")));
            }
        }
        if let Some(j) = pool.iter().find(|j| validation.binary_search(j).is_ok()) {
            return Err(Error::Elicitation(format!("item {j} is in both pools")));
        }
        let prior = model.user_prior();
        let mut user = prior.means.clone();
        user.extend(prior.scales.iter().map(|&s| softplus_inv(s)));
        Ok(ElicitationSession {
            model,
            config,
            user,
            pool,
            validation,
            queried: BTreeSet::new(),
            pending: Vec::new(),
            revealed: Vec::new(),
            rounds: 0,
            updates: 0,
            trajectory: vec![prior],
        })
    }

    /// Session over the whole catalog with nothing held out.
    pub fn live(model: Arc<FrozenModel>, config: SessionConfig) -> Result<Self> {
        let pool = model.catalog().to_vec();
        Self::new(model, pool, Vec::new(), config)
    }

    pub fn model(&self) -> &Arc<FrozenModel> {
        &self.model
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn validation(&self) -> &[usize] {
        &self.validation
    }

    pub fn pending(&self) -> &[usize] {
        &self.pending
    }

    pub fn revealed(&self) -> &[(usize, f64)] {
        &self.revealed
    }

    /// Every item ever handed out as a query, answered or not.
    pub fn queried(&self) -> &BTreeSet<usize> {
        &self.queried
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Pool items whose answers are unknown.
    pub fn unrevealed(&self) -> Vec<usize> {
        let known: BTreeSet<usize> = self.revealed.iter().map(|&(j, _)| j).collect();
        self.pool.iter().copied().filter(|j| !known.contains(j)).collect()
    }

    pub fn user_state(&self) -> UserState {
        let d1 = self.model.dim() + 1;
        UserState {
            means: self.user[..d1].to_vec(),
            scales: self.user[d1..].iter().map(|&r| softplus(r)).collect(),
        }
    }

    /// User posterior at the start and after every update.
    pub fn trajectory(&self) -> &[UserState] {
        &self.trajectory
    }

    /// Unconstrained user block `[μ.., ρ..]`.
    pub fn user_params(&self) -> &[f64] {
        &self.user
    }

    /// Monte-Carlo predictive mean and raw-score variance per item.
    ///
    /// The global bias and user draws are shared by all items, and each
    /// item's own draws come from a stream keyed by its id, so an item's
    /// numbers do not depend on which other items are asked for. Draws are
    /// renewed after every update.
    pub fn item_stats(&self, items: &[usize]) -> Vec<ItemStats> {
        let model = &*self.model;
        let params = model.params();
        let d = model.dim();
        let samples = self.config.samples;
        let root = seed::derive(self.config.seed, &format!("session/stats/{}", self.updates));

        let mut shared = GaussianNoise(seed::rng(root, "shared"));
        let (mu0, s0) = params.global_bias();
        let mut offsets = Vec::with_capacity(samples);
        let mut user_v = Vec::with_capacity(samples * d);
        for _ in 0..samples {
            let w0 = mu0 + shared.next_eps() * s0;
            let bu = self.draw_user(0, shared.next_eps());
            offsets.push(w0 + bu);
            for j in 1..=d {
                user_v.push(self.draw_user(j, shared.next_eps()));
            }
        }

        items
            .iter()
            .map(|&item| {
                let k = model.item_feature(item);
                let mut noise = GaussianNoise(seed::rng(root, &format!("item/{item}")));
                let (mut mean, mut m2, mut resp) = (0.0, 0.0, 0.0);
                for s in 0..samples {
                    let (bm, bs) = params.bias(k);
                    let mut y = offsets[s] + bm + noise.next_eps() * bs;
                    for f in 0..d {
                        let (vm, vs) = params.embedding(k, f);
                        y += user_v[s * d + f] * (vm + noise.next_eps() * vs);
                    }
                    resp += mean_response(y, model.task());
                    // Welford
                    let delta = y - mean;
                    mean += delta / (s + 1) as f64;
                    m2 += delta * (y - mean);
                }
                ItemStats {
                    item,
                    mean: resp / samples as f64,
                    variance: if samples > 1 { m2 / (samples - 1) as f64 } else { 0.0 },
                }
            })
            .collect()
    }

    fn draw_user(&self, j: usize, eps: f64) -> f64 {
        let d1 = self.model.dim() + 1;
        self.user[j] + eps * softplus(self.user[d1 + j])
    }

    /// Mean raw-score variance over the unrevealed pool.
    pub fn pool_variance(&self) -> f64 {
        let items = self.unrevealed();
        if items.is_empty() {
            return 0.0;
        }
        self.item_stats(&items).iter().map(|s| s.variance).sum::<f64>() / items.len() as f64
    }

    /// The next `batch` queries, without changing any state.
    pub fn plan_queries(&self, batch: usize) -> Result<Vec<usize>> {
        if batch == 0 {
            return Err(Error::invalid("query batch size must be positive"));
        }
        let candidates: Vec<usize> = self
            .pool
            .iter()
            .copied()
            .filter(|j| !self.queried.contains(j))
            .collect();
        if candidates.len() < batch {
            return Err(Error::Elicitation(format!(
                "pool exhausted: {} unqueried items, {batch} requested",
                candidates.len()
            )));
        }
        let picked = match self.config.strategy {
            Strategy::Random => {
                let mut rng = seed::rng(self.config.seed, &format!("session/select/{}", self.rounds));
                index::sample(&mut rng, candidates.len(), batch)
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect()
            }
            Strategy::MeanClosestHalf => {
                let mut stats = self.item_stats(&candidates);
                stats.sort_by(|a, b| {
                    (a.mean - 0.5)
                        .abs()
                        .total_cmp(&(b.mean - 0.5).abs())
                        .then(a.item.cmp(&b.item))
                });
                stats.iter().take(batch).map(|s| s.item).collect()
            }
            Strategy::MaxVariance => {
                let mut stats = self.item_stats(&candidates);
                stats.sort_by(|a, b| b.variance.total_cmp(&a.variance).then(a.item.cmp(&b.item)));
                stats.iter().take(batch).map(|s| s.item).collect()
            }
        };
        Ok(picked)
    }

    /// Picks the next queries and marks them pending.
    pub fn select_queries(&mut self, batch: usize) -> Result<Vec<usize>> {
        if !self.pending.is_empty() {
            return Err(Error::Elicitation(format!(
                "{} queries still await answers",
                self.pending.len()
            )));
        }
        let picked = self.plan_queries(batch)?;
        self.queried.extend(&picked);
        self.pending = picked.clone();
        self.rounds += 1;
        Ok(picked)
    }

    /// Records answers to pending queries and re-fits the user block.
    ///
    /// Either every answer is accepted or none is.
    pub fn answer(&mut self, answers: &[(usize, f64)]) -> Result<UpdateReport> {
        if answers.is_empty() {
            return Err(Error::Empty("answers"));
        }
        let mut seen = BTreeSet::new();
        for &(item, label) in answers {
            if !self.pending.contains(&item) || !seen.insert(item) {
                return Err(Error::NotPending(item));
            }
            let ok = match self.model.task() {
                Task::Classification => label == 0.0 || label == 1.0,
                Task::Regression => label.is_finite(),
            };
            if !ok {
                return Err(Error::invalid(format!("label {label} for item {item}")));
            }
        }
        self.pending.retain(|j| !seen.contains(j));
        self.revealed.extend_from_slice(answers);
        Ok(self.update())
    }

    /// Fresh noise for the next update.
    pub fn update_draws(&self) -> UpdateDraws {
        let d1 = self.model.dim() + 1;
        let samples = self.config.samples;
        let mut noise = GaussianNoise(seed::rng(self.config.seed, &format!("session/update/{}", self.updates)));
        let shared = (0..samples * (d1 + 1)).map(|_| noise.next_eps()).collect();
        let items = (0..samples * self.revealed.len() * d1)
            .map(|_| noise.next_eps())
            .collect();
        UpdateDraws { samples, shared, items }
    }

    /// Sample-average ELBO of the revealed answers as a function of the
    /// unconstrained user block, with everything else frozen, and its
    /// gradient.
    pub fn restricted_objective(&self, user: &[f64], draws: &UpdateDraws) -> (f64, Vec<f64>) {
        let model = &*self.model;
        let params = model.params();
        let d = model.dim();
        let d1 = d + 1;
        assert_eq!(user.len(), 2 * d1, "user block has the wrong length");
        let samples = draws.samples;
        let n = self.revealed.len();
        let alpha = params.noise_precision();
        let (mu0, s0) = params.global_bias();

        let mut value = 0.0;
        let mut grad = vec![0.0; 2 * d1];
        let mut theta = vec![0.0; d1];
        let mut g_theta = vec![0.0; d1];
        let mut v = vec![0.0; d];
        for s in 0..samples {
            let sh = &draws.shared[s * (d1 + 1)..(s + 1) * (d1 + 1)];
            let w0 = mu0 + sh[0] * s0;
            for j in 0..d1 {
                theta[j] = user[j] + sh[1 + j] * softplus(user[d1 + j]);
            }
            g_theta.fill(0.0);
            for (r, &(item, label)) in self.revealed.iter().enumerate() {
                let k = model.item_feature(item);
                let eps = &draws.items[(s * n + r) * d1..(s * n + r + 1) * d1];
                let (bm, bs) = params.bias(k);
                let mut y = w0 + theta[0] + bm + eps[0] * bs;
                for f in 0..d {
                    let (vm, vs) = params.embedding(k, f);
                    v[f] = vm + eps[1 + f] * vs;
                    y += theta[1 + f] * v[f];
                }
                let (ll, dy) = log_likelihood(y, label, model.task(), alpha);
                value += ll / samples as f64;
                let g = dy / samples as f64;
                g_theta[0] += g;
                for f in 0..d {
                    g_theta[1 + f] += g * v[f];
                }
            }
            for j in 0..d1 {
                grad[j] += g_theta[j];
                grad[d1 + j] += g_theta[j] * sh[1 + j] * softplus_grad(user[d1 + j]);
            }
        }
        for j in 0..d1 {
            let (nu, lambda) = model.prior(j);
            let (mu, rho) = (user[j], user[d1 + j]);
            let sigma = softplus(rho);
            value -= kl(mu, sigma, nu, lambda);
            grad[j] -= lambda * (mu - nu);
            grad[d1 + j] -= (lambda * sigma - 1.0 / sigma) * softplus_grad(rho);
        }
        (value, grad)
    }

    /// Re-fits the user block to all answers so far, warm-starting from the
    /// current block. The noise is fixed for the whole call.
    pub fn update(&mut self) -> UpdateReport {
        if self.revealed.is_empty() {
            return UpdateReport {
                iterations: 0,
                objective: 0.0,
                gradient_norm: 0.0,
                stop: UpdateStop::NoAnswers,
            };
        }
        let cfg = self.config.update;
        let draws = self.update_draws();
        let mut adam = Adam::new(
            self.user.len(),
            AdamConfig {
                learning_rate: cfg.learning_rate,
                ..AdamConfig::default()
            },
        );
        let touched: Vec<usize> = (0..self.user.len()).collect();
        let mut user = self.user.clone();
        // Keep the best iterate seen, or the stationary point once reached.
        let mut best = (f64::NEG_INFINITY, user.clone(), f64::INFINITY);
        let mut prev = f64::NEG_INFINITY;
        let mut decreases = 0;
        let mut stop = UpdateStop::MaxIterations;
        let mut iterations = 0;
        while iterations < cfg.max_iterations {
            let (value, grad) = self.restricted_objective(&user, &draws);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if value > best.0 {
                best = (value, user.clone(), norm);
            }
            if norm < cfg.tolerance {
                best = (value, user.clone(), norm);
                stop = UpdateStop::Converged;
                break;
            }
            if value < prev {
                decreases += 1;
                if decreases >= cfg.patience {
                    stop = UpdateStop::Patience;
                    break;
                }
            } else {
                decreases = 0;
            }
            prev = value;
            adam.step(
                &mut user,
                &Gradient {
                    values: grad,
                    touched: touched.clone(),
                },
            );
            iterations += 1;
        }
        if iterations == cfg.max_iterations {
            let (value, grad) = self.restricted_objective(&user, &draws);
            if value > best.0 {
                best = (value, user, grad.iter().map(|g| g * g).sum::<f64>().sqrt());
            }
        }
        let (objective, user, gradient_norm) = best;
        self.user = user;
        self.updates += 1;
        self.trajectory.push(self.user_state());
        UpdateReport {
            iterations,
            objective,
            gradient_norm,
            stop,
        }
    }
}
