//! Variational training loop.
//!
//! Each batch: draw ε for the global bias once and for every active feature
//! `S` times, evaluate the debiased ELBO gradient, take one Adam ascent step
//! over the active posterior parameters and all hyper-parameters, then fold
//! the new posterior means into the iterate average.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::averaging::IterateAverage;
use crate::data::{split, Dataset, SparseInstance, Task};
use crate::elbo::{BatchStats, Draws, KlWeighting, Objective};
use crate::fm::{mean_response, SampledParams};
use crate::metrics::{self, Clamp, MetricsReport, PredictionSet, RATING_RANGE};
use crate::noise::{GaussianNoise, NoiseSource};
use crate::params::{InitConfig, VariationalParams};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSize {
    Full,
    #[serde(untagged)]
    Size(usize),
}

impl std::str::FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(BatchSize::Full);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(BatchSize::Size(n)),
            _ => Err(Error::invalid(format!(
                "batch size must be `full` or a positive integer, got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for BatchSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BatchSize::Full => f.write_str("full"),
            BatchSize::Size(n) => write!(f, "{n}"),
        }
    }
}

/// Which parameters to predict with: the final posterior means or the
/// running average of posterior means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    Last,
    #[default]
    Mean,
}

impl std::str::FromStr for Predictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Predictor::Last),
            "mean" => Ok(Predictor::Mean),
            other => Err(Error::invalid(format!("unknown predictor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    /// Embedding size `d`.
    pub dim: usize,
    /// Variational samples `S` per batch.
    pub samples: usize,
    pub batch_size: BatchSize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience_validation: usize,
    pub patience_elbo: usize,
    pub seed: u64,
    pub kl_weighting: KlWeighting,
    pub init: InitConfig,
    /// First epoch (1-based) whose iterates enter the average.
    pub average_from_epoch: usize,
    /// Predictor used for the per-epoch metrics and early stopping.
    pub validation_predictor: Predictor,
    /// Clamp regression predictions before RMSE.
    pub clamp: Option<Clamp>,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        TrainConfig {
            task,
            dim: 5,
            samples: 1,
            batch_size: BatchSize::Full,
            learning_rate: 0.1,
            max_epochs: 1000,
            patience_validation: 10,
            patience_elbo: 4,
            seed: 0,
            kl_weighting: KlWeighting::PerGroup,
            init: InitConfig::default(),
            average_from_epoch: 1,
            validation_predictor: Predictor::Mean,
            clamp: match task {
                Task::Regression => Some(RATING_RANGE),
                Task::Classification => None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("samples must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if self.patience_validation == 0 || self.patience_elbo == 0 {
            return Err(Error::invalid("patience values must be at least 1"));
        }
        if self.average_from_epoch == 0 {
            return Err(Error::invalid("average_from_epoch is 1-based"));
        }
        let i = &self.init;
        if !(i.scale > 0.0 && i.prior_precision > 0.0 && i.noise_precision > 0.0 && i.mean_std >= 0.0) {
            return Err(Error::invalid("initial scale, precisions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch ELBO estimates over the epoch.
    pub elbo: f64,
    pub train_metric: f64,
    pub valid_metric: Option<f64>,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    ValidationPatience,
    ElboPatience,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Wall times are left out so reruns produce identical files.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "epoch,elbo,train_metric,valid_metric")?;
        for r in &self.epochs {
            let valid = r.valid_metric.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.epoch, r.elbo, r.train_metric, valid)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Last iterate.
    pub params: VariationalParams,
    pub average: IterateAverage,
    pub history: History,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn predictor(&self, which: Predictor) -> VariationalParams {
        match which {
            Predictor::Last => self.params.clone(),
            Predictor::Mean => self.average.apply(&self.params),
        }
    }
}

/// Mean-response predictions of `params` on every instance.
pub fn predict(params: &SampledParams, data: &Dataset) -> Result<PredictionSet> {
    let mut out = PredictionSet::default();
    for x in data.instances() {
        out.push(x.label, mean_response(params.predict_raw(x)?, data.task()), None);
    }
    Ok(out)
}

pub fn evaluate(params: &VariationalParams, data: &Dataset, clamp: Option<Clamp>) -> Result<MetricsReport> {
    MetricsReport::compute(data.task(), &predict(&params.posterior_mean(), data)?, clamp)
}

/// Step-by-step driver; [`train`] wraps it with stopping rules.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a Dataset,
    params: VariationalParams,
    adam: Adam,
    average: IterateAverage,
    order: Vec<usize>,
    shuffle_rng: rand_chacha::ChaCha8Rng,
    full_batch: Option<(Vec<&'a SparseInstance>, BatchStats)>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if data.task() != config.task {
            return Err(Error::invalid(format!(
                "training set is {} but config says {}",
                data.task(),
                config.task
            )));
        }
        let params = VariationalParams::initialize(data.space(), config.dim, &config.init, config.seed);
        Self::with_params(data, config, params)
    }

    /// Starts from given parameters instead of a fresh initialization.
    pub fn with_params(data: &'a Dataset, config: TrainConfig, params: VariationalParams) -> Result<Self> {
        if params.num_features() != data.space().num_features() {
            return Err(Error::Dimension(format!(
                "parameters cover {} features, data has {}",
                params.num_features(),
                data.space().num_features()
            )));
        }
        let adam = Adam::new(
            params.values.len(),
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        let full_batch = match config.batch_size {
            BatchSize::Size(n) if n < data.len() => None,
            _ => {
                let batch: Vec<&SparseInstance> = data.instances().iter().collect();
                let stats = BatchStats::new(
                    &batch,
                    data.feature_counts(),
                    data.len(),
                    params.group_table(),
                    data.space().num_groups(),
                )?;
                Some((batch, stats))
            }
        };
        Ok(Trainer {
            average: IterateAverage::new(&params),
            shuffle_rng: seed::rng(config.seed, "batches"),
            order: (0..data.len()).collect(),
            config,
            data,
            params,
            adam,
            full_batch,
            epoch: 0,
        })
    }

    pub fn params(&self) -> &VariationalParams {
        &self.params
    }

    pub fn average(&self) -> &IterateAverage {
        &self.average
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn step(&mut self, batch: &[&SparseInstance], stats: &BatchStats, noise: &mut impl NoiseSource) -> f64 {
        let draws = Draws::sample(stats, self.config.samples, self.config.dim, noise);
        let objective = Objective {
            batch,
            stats,
            task: self.config.task,
            weighting: self.config.kl_weighting,
        };
        let (terms, grad) = objective.value_and_gradient(&self.params, &draws);
        if !terms.value.is_finite() {
            return terms.value;
        }
        self.adam.step(&mut self.params.values, &grad);
        if self.epoch + 1 >= self.config.average_from_epoch {
            self.average.record(&self.params);
        }
        terms.value
    }

    /// One pass over the training set. Returns the mean batch ELBO, measured
    /// before each batch's update.
    pub fn run_epoch(&mut self, noise: &mut impl NoiseSource) -> Result<f64> {
        let before = self.params.clone();
        let mut elbo_sum = 0.0;
        let mut batches = 0usize;
        if let Some((batch, stats)) = self.full_batch.take() {
            elbo_sum = self.step(&batch, &stats, noise);
            batches = 1;
            self.full_batch = Some((batch, stats));
        } else {
            let BatchSize::Size(size) = self.config.batch_size else {
                unreachable!("full batches are precomputed")
            };
            self.order.shuffle(&mut self.shuffle_rng);
            let order = std::mem::take(&mut self.order);
            let data = self.data;
            for chunk in order.chunks(size) {
                let batch: Vec<&SparseInstance> = chunk.iter().map(|&i| &data.instances()[i]).collect();
                let stats = BatchStats::new(
                    &batch,
                    data.feature_counts(),
                    data.len(),
                    self.params.group_table(),
                    data.space().num_groups(),
                )?;
                let value = self.step(&batch, &stats, noise);
                elbo_sum += value;
                batches += 1;
                if !value.is_finite() {
                    break;
                }
            }
            self.order = order;
        }
        self.epoch += 1;
        let elbo = elbo_sum / batches as f64;
        if !elbo.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                detail: format!("ELBO estimate is {elbo}"),
                last_finite: Box::new(before),
            });
        }
        Ok(elbo)
    }

    pub fn predictor(&self, which: Predictor) -> VariationalParams {
        match which {
            Predictor::Last => self.params.clone(),
            Predictor::Mean => self.average.apply(&self.params),
        }
    }

    pub fn into_outcome(self, history: History, stop: StopReason) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            average: self.average,
            history,
            stop,
        }
    }
}

/// Counts observations that are strictly worse than the one before.
#[derive(Debug, Clone)]
pub struct Patience {
    limit: usize,
    higher_is_better: bool,
    prev: f64,
    run: usize,
}

impl Patience {
    pub fn new(limit: usize, higher_is_better: bool) -> Self {
        Patience {
            limit,
            higher_is_better,
            prev: f64::NAN,
            run: 0,
        }
    }

    /// True once `limit` observations in a row have each been worse than
    /// their predecessor.
    pub fn observe(&mut self, x: f64) -> bool {
        let worse = if self.higher_is_better {
            x < self.prev
        } else {
            x > self.prev
        };
        self.run = if worse { self.run + 1 } else { 0 };
        self.prev = x;
        self.run >= self.limit
    }
}

fn primary_metric(params: &VariationalParams, data: &Dataset, config: &TrainConfig) -> Result<f64> {
    let preds = predict(&params.posterior_mean(), data)?;
    match config.task {
        Task::Regression => metrics::rmse(&preds, config.clamp),
        // AUC is undefined on single-class sets; fall back to accuracy.
        Task::Classification => metrics::auc(&preds).or_else(|_| metrics::accuracy(&preds, 0.5)),
    }
}

/// Trains until the validation metric worsens `patience_validation` epochs in
/// a row, or, without a validation set, until the ELBO estimate decreases
/// `patience_elbo` epochs in a row.
pub fn train(train_set: &Dataset, validation: Option<&Dataset>, config: &TrainConfig) -> Result<TrainOutcome> {
    if let Some(v) = validation {
        if v.space() != train_set.space() {
            return Err(Error::invalid(
                "training and validation sets use different feature spaces",
            ));
        }
    }
    let validation = validation.filter(|v| !v.is_empty());
    let mut trainer = Trainer::new(train_set, config.clone())?;
    let mut noise = GaussianNoise(seed::rng(config.seed, "train"));
    let mut history = History::default();
    let start = Instant::now();

    let mut valid_patience = Patience::new(config.patience_validation, config.task == Task::Classification);
    let mut elbo_patience = Patience::new(config.patience_elbo, true);
    let mut stop = StopReason::MaxEpochs;

    for _ in 0..config.max_epochs {
        let elbo = trainer.run_epoch(&mut noise)?;
        let predictor = trainer.predictor(config.validation_predictor);
        let train_metric = primary_metric(&predictor, train_set, config)?;
        let valid_metric = validation.map(|v| primary_metric(&predictor, v, config)).transpose()?;
        history.epochs.push(EpochRecord {
            epoch: trainer.epoch(),
            elbo,
            train_metric,
            valid_metric,
            wall_time: start.elapsed().as_secs_f64(),
        });
        tracing::debug!(epoch = trainer.epoch(), elbo, train_metric, ?valid_metric, "epoch");
        if trainer.epoch() < config.average_from_epoch {
            // Stopping rules only apply once averaging is under way.
            continue;
        }

        match valid_metric {
            Some(v) if valid_patience.observe(v) => {
                stop = StopReason::ValidationPatience;
                break;
            }
            None if elbo_patience.observe(elbo) => {
                stop = StopReason::ElboPatience;
                break;
            }
            _ => {}
        }
    }
    Ok(trainer.into_outcome(history, stop))
}

/// Result of [`train_with_refit`].
#[derive(Debug, Clone)]
pub struct RefitOutcome {
    /// Run on the reduced training set, stopped on the validation metric.
    pub selection: TrainOutcome,
    /// Run on the full training set for the selected number of epochs.
    pub refit: TrainOutcome,
}

/// Holds out `validation_fraction` of `train_set` to choose the number of
/// epochs, then retrains on all of `train_set` for exactly that many.
pub fn train_with_refit(train_set: &Dataset, validation_fraction: f64, config: &TrainConfig) -> Result<RefitOutcome> {
    let parts = split(
        train_set,
        &[1.0 - validation_fraction, validation_fraction],
        seed::derive(config.seed, "validation"),
    )?;
    let selection = train(&parts[0], Some(&parts[1]), config)?;
    let mut refit_config = config.clone();
    refit_config.max_epochs = selection.history.epochs.len();
    refit_config.patience_elbo = usize::MAX;
    let refit = train(train_set, None, &refit_config)?;
    Ok(RefitOutcome { selection, refit })
}
