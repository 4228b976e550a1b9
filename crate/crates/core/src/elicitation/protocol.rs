//! Simulated elicitation: held-out users answer from a known matrix.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ElicitationSession, FrozenModel, PreferenceMatrix, SessionConfig, Strategy, UpdateConfig};
use crate::data::{split_indices, Task};
use crate::metrics::{MetricsReport, PredictionSet};
use crate::train::{train, Predictor, TrainConfig, TrainOutcome};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElicitationProtocol {
    /// Users seen during training; the rest are elicited.
    pub observed_user_fraction: f64,
    pub interactive_fraction: f64,
    pub validation_fraction: f64,
    pub query_batch_size: usize,
    pub rounds: usize,
    pub samples: usize,
    pub update: UpdateConfig,
}

impl Default for ElicitationProtocol {
    fn default() -> Self {
        ElicitationProtocol {
            observed_user_fraction: 0.8,
            interactive_fraction: 0.5,
            validation_fraction: 0.5,
            query_batch_size: 4,
            rounds: 5,
            samples: 100,
            update: UpdateConfig::default(),
        }
    }
}

impl ElicitationProtocol {
    pub fn validate(&self, num_users: usize, num_items: usize) -> Result<()> {
        let frac = |name: &str, f: f64| {
            if f > 0.0 && f < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be in (0, 1), got {f}")))
            }
        };
        frac("observed user fraction", self.observed_user_fraction)?;
        frac("interactive fraction", self.interactive_fraction)?;
        frac("validation fraction", self.validation_fraction)?;
        if self.interactive_fraction + self.validation_fraction > 1.0 + 1e-9 {
            return Err(Error::invalid("interactive and validation fractions exceed 1"));
        }
        if self.query_batch_size == 0 || self.rounds == 0 || self.samples == 0 {
            return Err(Error::invalid("batch size, rounds and samples must be positive"));
        }
        let split = ExperimentSplit::new(num_users, num_items, self, 0)?;
        let needed = self.query_batch_size * self.rounds;
        if needed > split.interactive.len() {
            return Err(Error::invalid(format!(
                "{} rounds of {} queries need {needed} items, the interactive pool has {}",
                self.rounds,
                self.query_batch_size,
                split.interactive.len()
            )));
        }
        if split.observed_users.is_empty() || split.held_out_users.is_empty() {
            return Err(Error::invalid("need at least one observed and one held-out user"));
        }
        Ok(())
    }

    /// Fractions for `split_indices`: interactive, validation and any unused
    /// remainder.
    fn item_fractions(&self) -> Vec<f64> {
        let rest = 1.0 - self.interactive_fraction - self.validation_fraction;
        let mut f = vec![self.interactive_fraction, self.validation_fraction];
        if rest > 1e-9 {
            f.push(rest);
        }
        f
    }
}

/// Which users train the model and how items are divided for held-out users.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSplit {
    pub observed_users: Vec<usize>,
    pub held_out_users: Vec<usize>,
    pub interactive: Vec<usize>,
    pub validation: Vec<usize>,
}

impl ExperimentSplit {
    pub fn new(num_users: usize, num_items: usize, protocol: &ElicitationProtocol, seed: u64) -> Result<Self> {
        let f = protocol.observed_user_fraction;
        let mut users = split_indices(num_users, &[f, 1.0 - f], seed::derive(seed, "users"))?;
        let mut items = split_indices(num_items, &protocol.item_fractions(), seed::derive(seed, "items"))?;
        for part in users.iter_mut().chain(items.iter_mut()) {
            part.sort_unstable();
        }
        let mut users = users.into_iter();
        let mut items = items.into_iter();
        Ok(ExperimentSplit {
            observed_users: users.next().unwrap_or_default(),
            held_out_users: users.next().unwrap_or_default(),
            interactive: items.next().unwrap_or_default(),
            validation: items.next().unwrap_or_default(),
        })
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for part in [
            &self.observed_users,
            &self.held_out_users,
            &self.interactive,
            &self.validation,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            for &i in part {
                h.update((i as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Trains a classifier on the observed users' full rows and freezes its
/// averaged parameters.
pub fn train_observed(
    matrix: &PreferenceMatrix,
    split: &ExperimentSplit,
    config: &TrainConfig,
) -> Result<(FrozenModel, TrainOutcome)> {
    if config.task != Task::Classification {
        return Err(Error::invalid("elicitation models are classifiers"));
    }
    let data = matrix.to_dataset(&split.observed_users)?;
    let outcome = train(&data, None, config)?;
    let model = FrozenModel::new(outcome.predictor(Predictor::Mean), data.space(), Task::Classification)?;
    Ok((model, outcome))
}

/// Metrics over all held-out users' validation items after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub strategy: Strategy,
    pub items_revealed: usize,
    pub users: usize,
    pub acc: f64,
    pub auc: f64,
    pub map: f64,
    pub mean_variance: f64,
}

/// Runs every held-out user through `protocol.rounds` rounds. Predictions
/// for the validation items of all users are pooled per round before
/// scoring.
pub fn run_protocol(
    model: &Arc<FrozenModel>,
    matrix: &PreferenceMatrix,
    split: &ExperimentSplit,
    protocol: &ElicitationProtocol,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<RoundMetrics>> {
    if split.validation.is_empty() {
        tracing::warn!("empty validation pool, every user skipped");
        return Ok(Vec::new());
    }
    let mut pooled = vec![PredictionSet::default(); protocol.rounds];
    let mut users = 0;
    for &u in &split.held_out_users {
        let config = SessionConfig {
            strategy,
            samples: protocol.samples,
            update: protocol.update,
            seed: seed::derive(seed, &format!("session/{u}")),
        };
        let mut session = ElicitationSession::new(
            model.clone(),
            split.interactive.clone(),
            split.validation.clone(),
            config,
        )?;
        for preds in pooled.iter_mut() {
            let queries = session.select_queries(protocol.query_batch_size)?;
            let answers: Vec<(usize, f64)> = queries.iter().map(|&j| (j, f64::from(matrix.get(u, j)))).collect();
            session.answer(&answers)?;
            for s in session.item_stats(&split.validation) {
                preds.push(f64::from(matrix.get(u, s.item)), s.mean, Some(s.variance));
            }
        }
        users += 1;
    }
    pooled
        .iter()
        .enumerate()
        .map(|(r, preds)| {
            let report = MetricsReport::compute(Task::Classification, preds, None)?;
            Ok(RoundMetrics {
                strategy,
                items_revealed: (r + 1) * protocol.query_batch_size,
                users,
                acc: report.acc.unwrap_or(f64::NAN),
                auc: report.auc.unwrap_or(f64::NAN),
                map: report.map.unwrap_or(f64::NAN),
                mean_variance: report.mean_variance.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub split_fingerprint: String,
    pub model_fingerprint: String,
    pub rounds: Vec<RoundMetrics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
}

impl ExperimentResult {
    pub fn rounds(&self) -> impl Iterator<Item = &RoundMetrics> {
        self.runs.iter().flat_map(|r| &r.rounds)
    }

    pub fn aggregate(&self) -> Vec<AggregateRow> {
        aggregate(self.rounds())
    }
}

/// For each seed: split users and items, train on the observed users, then
/// run every strategy on the same split and model.
pub fn run_experiment(
    matrix: &PreferenceMatrix,
    protocol: &ElicitationProtocol,
    strategies: &[Strategy],
    train_config: &TrainConfig,
    seeds: &[u64],
) -> Result<ExperimentResult> {
    protocol.validate(matrix.num_users(), matrix.num_items())?;
    let mut result = ExperimentResult::default();
    for &s in seeds {
        let split = ExperimentSplit::new(matrix.num_users(), matrix.num_items(), protocol, s)?;
        let mut config = train_config.clone();
        config.seed = s;
        let (model, _) = train_observed(matrix, &split, &config)?;
        let model = Arc::new(model);
        let mut rounds = Vec::new();
        for &strategy in strategies {
            rounds.extend(run_protocol(&model, matrix, &split, protocol, strategy, s)?);
        }
        tracing::info!(seed = s, "elicitation seed done");
        result.runs.push(SeedRun {
            seed: s,
            split_fingerprint: split.fingerprint(),
            model_fingerprint: model.fingerprint(),
            rounds,
        });
    }
    Ok(result)
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: Strategy,
    pub items_revealed: usize,
    pub seeds: usize,
    pub acc: (f64, f64),
    pub auc: (f64, f64),
    pub map: (f64, f64),
    pub mean_variance: (f64, f64),
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by strategy and revealed count.
pub fn aggregate<'a>(rows: impl IntoIterator<Item = &'a RoundMetrics>) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(Strategy, usize), Vec<&RoundMetrics>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.strategy, r.items_revealed)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((strategy, items_revealed), rs)| {
            let col = |f: fn(&RoundMetrics) -> f64| mean_sd(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                strategy,
                items_revealed,
                seeds: rs.len(),
                acc: col(|r| r.acc),
                auc: col(|r| r.auc),
                map: col(|r| r.map),
                mean_variance: col(|r| r.mean_variance),
            }
        })
        .collect()
}

pub fn write_rounds_csv<'a>(rows: impl IntoIterator<Item = &'a RoundMetrics>, mut out: impl Write) -> Result<()> {
    writeln!(out, "strategy,items_revealed,users,acc,auc,map,mean_variance")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.strategy, r.items_revealed, r.users, r.acc, r.auc, r.map, r.mean_variance
        )?;
    }
    Ok(())
}

pub fn write_aggregate_csv(rows: &[AggregateRow], mut out: impl Write) -> Result<()> {
    writeln!(
        out,
        "strategy,items_revealed,seeds,acc,acc_sd,auc,auc_sd,map,map_sd,mean_variance,mean_variance_sd"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.strategy,
            r.items_revealed,
            r.seeds,
            r.acc.0,
            r.acc.1,
            r.auc.0,
            r.auc.1,
            r.map.0,
            r.map.1,
            r.mean_variance.0,
            r.mean_variance.1
        )?;
    }
    Ok(())
}
