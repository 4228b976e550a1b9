use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use serde_json::json;

use vfm_core::checkpoint::Checkpoint;
use vfm_core::config::parse_key_values;
use vfm_core::data::{
    encode_in_space, encode_indexed, parse_groups, parse_libsvm, read_ratings, split, train_test_split, Dataset, Task,
};
use vfm_core::metrics::MetricsReport;
use vfm_core::seed;
use vfm_core::train::{evaluate, train, train_with_refit, Predictor};

use crate::settings::{collect, Experiment};
use crate::{existing, usage, Outcome};

#[derive(Args)]
pub struct TrainArgs {
    /// `key = value` file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ratings file (`u.data`, `ratings.dat`, `ratings.csv`), a directory
    /// holding `u.data`, or a libsvm file together with `--groups`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    groups: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    /// `full` or a positive integer.
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    patience_valid: Option<String>,
    #[arg(long)]
    patience_elbo: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// `per-group` or `global`.
    #[arg(long)]
    kl_weighting: Option<String>,
    #[arg(long)]
    average_from: Option<String>,
    /// Predictor used for early stopping: `last` or `mean`.
    #[arg(long)]
    predictor: Option<String>,
    /// Do not clamp regression predictions to the rating range.
    #[arg(long)]
    no_clamp: bool,
    #[arg(long)]
    test_fraction: Option<String>,
    /// Hold out this fraction of the training part for early stopping.
    #[arg(long)]
    validation: Option<String>,
    /// After early stopping, retrain on the whole training part.
    #[arg(long)]
    refit: bool,
    #[arg(long)]
    out: PathBuf,
}

impl TrainArgs {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("data", self.data.clone()),
            ("groups", self.groups.clone()),
            ("task", self.task.clone()),
            ("d", self.d.clone()),
            ("lr", self.lr.clone()),
            ("samples", self.samples.clone()),
            ("batch-size", self.batch_size.clone()),
            ("epochs", self.epochs.clone()),
            ("patience-valid", self.patience_valid.clone()),
            ("patience-elbo", self.patience_elbo.clone()),
            ("seed", self.seed.clone()),
            ("kl-weighting", self.kl_weighting.clone()),
            ("average-from", self.average_from.clone()),
            ("predictor", self.predictor.clone()),
            ("clamp", self.no_clamp.then(|| "false".to_string())),
            ("test-fraction", self.test_fraction.clone()),
            ("validation", self.validation.clone()),
            ("refit", self.refit.then(|| "true".to_string())),
        ]
    }
}

/// Bare names such as `ml-100k` or `ml100k` resolve to `data/<name>/u.data`.
fn resolve_data(path: &Path) -> Outcome<PathBuf> {
    if !path.exists() && path.components().count() == 1 {
        let name = path.to_string_lossy();
        let dashed = name
            .strip_prefix("ml")
            .filter(|rest| !rest.starts_with('-'))
            .map(|rest| format!("ml-{rest}"));
        for candidate in [Some(name.to_string()), dashed].into_iter().flatten() {
            let guess = Path::new("data").join(candidate).join("u.data");
            if guess.exists() {
                return Ok(guess);
            }
        }
    }
    let path = existing(path)?;
    if path.is_dir() {
        return existing(&path.join("u.data"));
    }
    Ok(path)
}

pub fn load_dataset(exp: &Experiment) -> Outcome<Dataset> {
    let path = resolve_data(&exp.data)?;
    let task = exp.train.task;
    let data = match &exp.groups {
        Some(groups) => {
            let space = parse_groups(BufReader::new(File::open(existing(groups)?)?))?;
            parse_libsvm(BufReader::new(File::open(&path)?), &space, task)
        }
        None => read_ratings(BufReader::new(File::open(&path)?)).and_then(|r| encode_indexed(&r, task)),
    };
    Ok(data.with_context(|| format!("reading {}", path.display()))?)
}

fn write_file(path: &Path, contents: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> Outcome {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    contents(&mut out)?;
    out.flush()?;
    Ok(())
}

fn reports(
    params: &Checkpoint,
    data: &Dataset,
    predictors: &[Predictor],
) -> Outcome<serde_json::Map<String, serde_json::Value>> {
    let mut out = serde_json::Map::new();
    for &p in predictors {
        let report = evaluate(&params.predictor(p), data, params.config.clamp)?;
        out.insert(predictor_name(p).to_string(), serde_json::to_value(report)?);
    }
    Ok(out)
}

fn predictor_name(p: Predictor) -> &'static str {
    match p {
        Predictor::Last => "last",
        Predictor::Mean => "mean",
    }
}

pub fn run_train(args: TrainArgs) -> Outcome {
    let exp = Experiment::from_settings(collect(args.config.as_deref(), args.flags())?)?;
    let data = load_dataset(&exp)?;
    let cfg = &exp.train;
    let (train_part, test) = train_test_split(&data, exp.test_fraction, cfg.seed)?;

    let start = Instant::now();
    let (fit_set, outcome, selected) = if exp.refit {
        let r = train_with_refit(&train_part, exp.validation, cfg)?;
        (train_part, r.refit, Some(r.selection))
    } else if exp.validation > 0.0 {
        let parts = split(
            &train_part,
            &[1.0 - exp.validation, exp.validation],
            seed::derive(cfg.seed, "validation"),
        )?;
        let mut parts = parts.into_iter();
        let (fit, valid) = (parts.next().unwrap(), parts.next().unwrap());
        let outcome = train(&fit, Some(&valid), cfg)?;
        (fit, outcome, None)
    } else {
        let outcome = train(&train_part, None, cfg)?;
        (train_part, outcome, None)
    };
    let elapsed = start.elapsed();

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt = Checkpoint::new(
        data.space().clone(),
        cfg.clone(),
        outcome.params.clone(),
        Some(outcome.average.clone()),
    )
    .with_feature_counts(fit_set.feature_counts().to_vec());
    ckpt.save(args.out.join("checkpoint.json"))?;
    fs::write(args.out.join("config.snapshot"), exp.snapshot())?;
    write_file(&args.out.join("history.csv"), |w| Ok(outcome.history.write_csv(w)?))?;
    if let Some(sel) = &selected {
        write_file(&args.out.join("selection_history.csv"), |w| {
            Ok(sel.history.write_csv(w)?)
        })?;
    }

    let test_reports = reports(&ckpt, &test, &[Predictor::Last, Predictor::Mean])?;
    let last_valid = selected
        .as_ref()
        .unwrap_or(&outcome)
        .history
        .epochs
        .iter()
        .rev()
        .find_map(|r| r.valid_metric);
    let metrics = json!({
        "task": cfg.task,
        "epochs": outcome.history.epochs.len(),
        "stop": outcome.stop,
        "train_instances": fit_set.len(),
        "test_instances": test.len(),
        "validation_metric": last_valid,
        "test": test_reports,
    });
    fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;

    let metric = primary_name(cfg.task);
    if let Some(v) = last_valid {
        println!("final validation {metric}: {v:.4}");
    }
    for p in ["mean", "last"] {
        if let Some(v) = test_reports[p].get(metric).and_then(|v| v.as_f64()) {
            println!("test {metric} ({p} predictor): {v:.4}");
        }
    }
    eprintln!(
        "{} epochs in {:.1}s, outputs in {}",
        outcome.history.epochs.len(),
        elapsed.as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn primary_name(task: Task) -> &'static str {
    match task {
        Task::Regression => "rmse",
        Task::Classification => "auc",
    }
}

#[derive(Args)]
pub struct EvalArgs {
    /// Output directory of `vfm train`: evaluates on the same held-out test split.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    run: Option<PathBuf>,
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Ratings or libsvm file scored as a whole.
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    /// Feature groups file when `--data` is libsvm.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// `last`, `mean` or `both`.
    #[arg(long, default_value = "both")]
    predictor: String,
    #[arg(long)]
    no_clamp: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run_eval(args: EvalArgs) -> Outcome {
    let predictors = match args.predictor.as_str() {
        "both" => vec![Predictor::Last, Predictor::Mean],
        p => vec![p.parse::<Predictor>().or_else(|e| usage(e.to_string()))?],
    };
    let (mut ckpt, test) = match (&args.run, &args.checkpoint, &args.data) {
        (Some(run), _, _) => {
            let snapshot = File::open(existing(&run.join("config.snapshot"))?)?;
            let exp = Experiment::from_settings(parse_key_values(BufReader::new(snapshot))?)?;
            let ckpt = Checkpoint::load(existing(&run.join("checkpoint.json"))?)?;
            let data = load_dataset(&exp)?;
            let (_, test) = train_test_split(&data, exp.test_fraction, exp.train.seed)?;
            (ckpt, test)
        }
        (None, Some(path), Some(data)) => {
            let ckpt = Checkpoint::load(existing(path)?)?;
            let task = ckpt.config.task;
            let data_path = existing(data)?;
            let test = match &args.groups {
                Some(g) => {
                    let space = parse_groups(BufReader::new(File::open(existing(g)?)?))?;
                    ckpt.check_space(&space)?;
                    parse_libsvm(BufReader::new(File::open(&data_path)?), &space, task)?
                }
                None => encode_in_space(
                    &read_ratings(BufReader::new(File::open(&data_path)?))?,
                    &ckpt.space,
                    task,
                )?,
            };
            (ckpt, test)
        }
        _ => return usage("give --run DIR, or --checkpoint and --data"),
    };
    ckpt.check_space(test.space())?;
    if args.no_clamp {
        ckpt.config.clamp = None;
    }
    let task = ckpt.config.task;
    let found = reports(&ckpt, &test, &predictors)?;
    if let (Some(last), Some(mean)) = (found.get("last"), found.get("mean")) {
        let get = |r: &serde_json::Value| {
            serde_json::from_value::<MetricsReport>(r.clone())
                .ok()
                .and_then(|m| m.primary(task))
        };
        if let (Some(l), Some(m)) = (get(last), get(mean)) {
            let mean_worse = match task {
                Task::Regression => m > l,
                Task::Classification => m < l,
            };
            if mean_worse {
                eprintln!(
                    "warning: averaged parameters score worse than the last iterate ({} {m:.4} vs {l:.4})",
                    primary_name(task)
                );
            }
        }
    }
    let report = json!({ "task": task, "instances": test.len(), "metrics": found });
    let text = serde_json::to_string_pretty(&report)? + "\n";
    print!("{text}");
    if let Some(out) = &args.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
