//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys mirror the long CLI flags
//! (`task`, `d`, `lr`, `samples`, `batch-size`, `epochs`, `patience-valid`,
//! `patience-elbo`, `seed`, `kl-weighting`, `average-from`, `predictor`,
//! `clamp`).

use std::collections::BTreeMap;
use std::io::BufRead;

use crate::elbo::KlWeighting;
use crate::metrics::RATING_RANGE;
use crate::train::TrainConfig;
use crate::{Error, Result};

pub fn parse_key_values(reader: impl BufRead) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

/// Applies one setting; unknown keys are an error.
pub fn apply(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "task" => {
            config.task = value.parse()?;
            if config.task == crate::data::Task::Classification {
                config.clamp = None;
            }
        }
        "d" | "dim" => config.dim = parse(key, value)?,
        "lr" | "learning-rate" => config.learning_rate = parse(key, value)?,
        "samples" => config.samples = parse(key, value)?,
        "batch-size" => config.batch_size = value.parse()?,
        "epochs" | "max-epochs" => config.max_epochs = parse(key, value)?,
        "patience-valid" => config.patience_validation = parse(key, value)?,
        "patience-elbo" => config.patience_elbo = parse(key, value)?,
        "seed" => config.seed = parse(key, value)?,
        "average-from" => config.average_from_epoch = parse(key, value)?,
        "predictor" => config.validation_predictor = value.parse()?,
        "kl-weighting" => {
            config.kl_weighting = match value {
                "per-group" => KlWeighting::PerGroup,
                "global" => KlWeighting::Global,
                _ => return Err(Error::invalid(format!("unknown kl-weighting {value:?}"))),
            }
        }
        "clamp" => {
            config.clamp = if parse::<bool>(key, value)? {
                Some(RATING_RANGE)
            } else {
                None
            }
        }
        "init-precision" => config.init.prior_precision = parse(key, value)?,
        "init-scale" => config.init.scale = parse(key, value)?,
        _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// Writes every setting back out in the same format.
pub fn to_key_values(config: &TrainConfig) -> String {
    let kl = match config.kl_weighting {
        KlWeighting::PerGroup => "per-group",
        KlWeighting::Global => "global",
    };
    let predictor = match config.validation_predictor {
        crate::train::Predictor::Last => "last",
        crate::train::Predictor::Mean => "mean",
    };
    format!(
        "task = {}\nd = {}\nlr = {}\nsamples = {}\nbatch-size = {}\nepochs = {}\npatience-valid = {}\n\
         patience-elbo = {}\nseed = {}\nkl-weighting = {kl}\naverage-from = {}\npredictor = {predictor}\n\
         clamp = {}\ninit-precision = {}\ninit-scale = {}\n",
        config.task,
        config.dim,
        config.learning_rate,
        config.samples,
        config.batch_size,
        config.max_epochs,
        config.patience_validation,
        config.patience_elbo,
        config.seed,
        config.average_from_epoch,
        config.clamp.is_some(),
        config.init.prior_precision,
        config.init.scale,
    )
}
