//! `key = value` settings shared by config files, flags and snapshots.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use vfm_core::config::{apply, parse_key_values, to_key_values};
use vfm_core::data::Task;
use vfm_core::train::TrainConfig;

use crate::{existing, usage, Outcome};

/// Config file values, overridden by the flags that were given.
pub fn collect(config: Option<&Path>, flags: Vec<(&str, Option<String>)>) -> Outcome<BTreeMap<String, String>> {
    let mut map = match config {
        Some(path) => {
            let file = File::open(existing(path)?)?;
            parse_key_values(BufReader::new(file))
                .map_err(|e| crate::Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => BTreeMap::new(),
    };
    for (key, value) in flags {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    }
    Ok(map)
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub data: PathBuf,
    /// Feature groups file for libsvm input.
    pub groups: Option<PathBuf>,
    pub test_fraction: f64,
    /// Fraction of the training part held out to choose the epoch count.
    pub validation: f64,
    /// Retrain on the whole training part for the chosen epoch count.
    pub refit: bool,
    pub train: TrainConfig,
}

pub fn number<T: std::str::FromStr>(key: &str, value: &str) -> Outcome<T> {
    value
        .parse()
        .or_else(|_| usage(format!("bad value {value:?} for {key}")))
}

impl Experiment {
    pub fn from_settings(mut map: BTreeMap<String, String>) -> Outcome<Self> {
        if let Some(cmd) = map.remove("command") {
            if cmd != "train" {
                return usage(format!("config is for {cmd:?}, not train"));
            }
        }
        let Some(task) = map.remove("task") else {
            return usage("--task is required (regression or classification)");
        };
        let task: Task = task.parse().or_else(|e| usage(format!("{e}")))?;
        let Some(data) = map.remove("data") else {
            return usage("--data is required");
        };
        let mut exp = Experiment {
            data: PathBuf::from(data),
            groups: map.remove("groups").map(PathBuf::from),
            test_fraction: 0.2,
            validation: 0.0,
            refit: false,
            train: TrainConfig::new(task),
        };
        for (key, value) in &map {
            match key.as_str() {
                "test-fraction" => exp.test_fraction = number(key, value)?,
                "validation" => exp.validation = number(key, value)?,
                "refit" => exp.refit = number(key, value)?,
                _ => apply(&mut exp.train, key, value).or_else(|e| usage(e.to_string()))?,
            }
        }
        if !(exp.test_fraction > 0.0 && exp.test_fraction < 1.0) {
            return usage("test-fraction must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&exp.validation) {
            return usage("validation must be in [0, 1)");
        }
        if exp.refit && exp.validation == 0.0 {
            return usage("--refit needs --validation > 0");
        }
        exp.train.validate().or_else(|e| usage(e.to_string()))?;
        Ok(exp)
    }

    /// Feeding this back through `--config` reproduces the run.
    pub fn snapshot(&self) -> String {
        let mut out = format!("command = train\ndata = {}\n", self.data.display());
        if let Some(g) = &self.groups {
            out.push_str(&format!("groups = {}\n", g.display()));
        }
        out.push_str(&format!(
            "test-fraction = {}\nvalidation = {}\nrefit = {}\n",
            self.test_fraction, self.validation, self.refit
        ));
        out.push_str(&to_key_values(&self.train));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn snapshot_roundtrip() {
        let exp = Experiment::from_settings(settings(&[
            ("task", "classification"),
            ("data", "data/ml-100k/u.data"),
            ("d", "3"),
            ("validation", "0.1"),
            ("refit", "true"),
            ("seed", "7"),
        ]))
        .unwrap();
        assert_eq!(exp.train.dim, 3);
        let text = exp.snapshot();
        let back = Experiment::from_settings(parse_key_values(text.as_bytes()).unwrap()).unwrap();
        assert_eq!(back, exp);
        assert_eq!(back.snapshot(), text);
    }

    #[test]
    fn bad_settings_are_usage_errors() {
        for bad in [
            settings(&[("data", "x")]),
            settings(&[("task", "regression")]),
            settings(&[("task", "nope"), ("data", "x")]),
            settings(&[("task", "regression"), ("data", "x"), ("refit", "true")]),
            settings(&[("task", "regression"), ("data", "x"), ("lr", "fast")]),
            settings(&[("task", "regression"), ("data", "x"), ("test-fraction", "1")]),
        ] {
            assert!(matches!(Experiment::from_settings(bad), Err(crate::Failure::Usage(_))));
        }
    }
}
