use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use vfm_core::data::{read_ratings, Task};
use vfm_core::elicitation::{
    build_movie10k, run_experiment, synthetic_preferences, write_aggregate_csv, ElicitationProtocol, PreferenceMatrix,
    Strategy, SyntheticConfig,
};
use vfm_core::train::TrainConfig;

use crate::settings::{collect, number};
use crate::{existing, usage, Outcome};

#[derive(Args)]
pub struct ElicitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Complete 0/1 matrix as written by `PreferenceMatrix::write_csv`.
    #[arg(long)]
    matrix: Option<String>,
    /// MovieLens ratings; the 100 most rated items by 100 sampled users.
    #[arg(long)]
    ratings: Option<String>,
    /// Planted low-rank 100 x 100 matrix.
    #[arg(long)]
    synthetic: bool,
    /// Seed for sampling or generating the matrix.
    #[arg(long)]
    matrix_seed: Option<String>,
    /// Comma separated: random, mean, variance; or `all`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    /// Number of seeds, starting at `--first-seed`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    first_seed: Option<String>,
    /// Posterior draws per estimate and per update.
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// A count, or `none` to always train for `--epochs`.
    #[arg(long)]
    patience_elbo: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

impl ElicitArgs {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("matrix", self.matrix.clone()),
            ("ratings", self.ratings.clone()),
            ("synthetic", self.synthetic.then(|| "true".to_string())),
            ("matrix-seed", self.matrix_seed.clone()),
            ("strategy", self.strategy.clone()),
            ("rounds", self.rounds.clone()),
            ("batch", self.batch.clone()),
            ("seeds", self.seeds.clone()),
            ("first-seed", self.first_seed.clone()),
            ("samples", self.samples.clone()),
            ("d", self.d.clone()),
            ("lr", self.lr.clone()),
            ("epochs", self.epochs.clone()),
            ("patience-elbo", self.patience_elbo.clone()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Matrix(PathBuf),
    Ratings(PathBuf),
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
struct Settings {
    source: Source,
    matrix_seed: u64,
    strategies: Vec<Strategy>,
    protocol: ElicitationProtocol,
    seeds: u64,
    first_seed: u64,
    train: TrainConfig,
}

fn parse_strategies(s: &str) -> Outcome<Vec<Strategy>> {
    if s == "all" {
        return Ok(Strategy::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in s.split(',').map(str::trim) {
        let strategy: Strategy = name.parse().or_else(|e| usage(format!("{e}")))?;
        if !out.contains(&strategy) {
            out.push(strategy);
        }
    }
    Ok(out)
}

impl Settings {
    fn from_settings(mut map: BTreeMap<String, String>) -> Outcome<Self> {
        if let Some(cmd) = map.remove("command") {
            if cmd != "elicit" {
                return usage(format!("config is for {cmd:?}, not elicit"));
            }
        }
        let synthetic = match map.remove("synthetic") {
            Some(v) => number::<bool>("synthetic", &v)?,
            None => false,
        };
        let source = match (map.remove("matrix"), map.remove("ratings"), synthetic) {
            (Some(m), None, false) => Source::Matrix(m.into()),
            (None, Some(r), false) => Source::Ratings(r.into()),
            (None, None, true) => Source::Synthetic,
            _ => return usage("give exactly one of --matrix, --ratings or --synthetic"),
        };
        let mut train = TrainConfig::new(Task::Classification);
        train.max_epochs = 300;
        train.patience_elbo = usize::MAX;
        let mut s = Settings {
            source,
            matrix_seed: 0,
            strategies: Strategy::ALL.to_vec(),
            protocol: ElicitationProtocol::default(),
            seeds: 10,
            first_seed: 0,
            train,
        };
        for (key, value) in &map {
            let v = value.as_str();
            match key.as_str() {
                "matrix-seed" => s.matrix_seed = number(key, v)?,
                "strategy" => s.strategies = parse_strategies(v)?,
                "rounds" => s.protocol.rounds = number(key, v)?,
                "batch" => s.protocol.query_batch_size = number(key, v)?,
                "seeds" => s.seeds = number(key, v)?,
                "first-seed" => s.first_seed = number(key, v)?,
                "samples" => s.protocol.samples = number(key, v)?,
                "d" => s.train.dim = number(key, v)?,
                "lr" => s.train.learning_rate = number(key, v)?,
                "epochs" => s.train.max_epochs = number(key, v)?,
                "patience-elbo" if v == "none" => s.train.patience_elbo = usize::MAX,
                "patience-elbo" => s.train.patience_elbo = number(key, v)?,
                _ => return usage(format!("unknown setting {key:?}")),
            }
        }
        if s.seeds == 0 {
            return usage("--seeds must be at least 1");
        }
        s.train.validate().or_else(|e| usage(e.to_string()))?;
        Ok(s)
    }

    fn snapshot(&self) -> String {
        let source = match &self.source {
            Source::Matrix(p) => format!("matrix = {}\n", p.display()),
            Source::Ratings(p) => format!("ratings = {}\n", p.display()),
            Source::Synthetic => "synthetic = true\n".to_string(),
        };
        let strategies: Vec<&str> = self.strategies.iter().map(|s| s.name()).collect();
        let patience = match self.train.patience_elbo {
            usize::MAX => "none".to_string(),
            n => n.to_string(),
        };
        format!(
            "command = elicit\n{source}matrix-seed = {}\nstrategy = {}\nrounds = {}\nbatch = {}\nseeds = {}\n\
             first-seed = {}\nsamples = {}\nd = {}\nlr = {}\nepochs = {}\npatience-elbo = {patience}\n",
            self.matrix_seed,
            strategies.join(","),
            self.protocol.rounds,
            self.protocol.query_batch_size,
            self.seeds,
            self.first_seed,
            self.protocol.samples,
            self.train.dim,
            self.train.learning_rate,
            self.train.max_epochs,
        )
    }

    fn matrix(&self) -> Outcome<PreferenceMatrix> {
        Ok(match &self.source {
            Source::Matrix(p) => PreferenceMatrix::read_csv(BufReader::new(File::open(existing(p)?)?))
                .with_context(|| format!("reading {}", p.display()))?,
            Source::Ratings(p) => {
                let ratings = read_ratings(BufReader::new(File::open(existing(p)?)?))
                    .with_context(|| format!("reading {}", p.display()))?;
                build_movie10k(&ratings, self.matrix_seed)?
            }
            Source::Synthetic => synthetic_preferences(&SyntheticConfig::default(), self.matrix_seed)?,
        })
    }
}

pub fn run(args: ElicitArgs) -> Outcome {
    let settings = Settings::from_settings(collect(args.config.as_deref(), args.flags())?)?;
    let matrix = settings.matrix()?;
    settings
        .protocol
        .validate(matrix.num_users(), matrix.num_items())
        .or_else(|e| usage(e.to_string()))?;
    let seeds: Vec<u64> = (settings.first_seed..settings.first_seed + settings.seeds).collect();
    let result = run_experiment(
        &matrix,
        &settings.protocol,
        &settings.strategies,
        &settings.train,
        &seeds,
    )?;

    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.snapshot"), settings.snapshot())?;
    let mut rounds = BufWriter::new(File::create(out.join("elicit_rounds.csv"))?);
    writeln!(rounds, "seed,strategy,items_revealed,users,acc,auc,map,mean_variance")?;
    for run in &result.runs {
        for r in &run.rounds {
            writeln!(
                rounds,
                "{},{},{},{},{},{},{},{}",
                run.seed, r.strategy, r.items_revealed, r.users, r.acc, r.auc, r.map, r.mean_variance
            )?;
        }
    }
    rounds.flush()?;
    fs::write(
        out.join("elicit_runs.json"),
        serde_json::to_string_pretty(&result)? + "\n",
    )?;

    let aggregate = result.aggregate();
    for &strategy in &settings.strategies {
        let rows: Vec<_> = aggregate.iter().filter(|r| r.strategy == strategy).cloned().collect();
        let mut table = Vec::new();
        write_aggregate_csv(&rows, &mut table)?;
        fs::write(out.join(format!("elicit_{strategy}.csv")), &table)?;
        println!("{strategy}:");
        println!(
            "{:>6} {:>14} {:>14} {:>14} {:>16}",
            "items", "acc", "auc", "map", "variance"
        );
        for r in &rows {
            println!(
                "{:>6} {:>7.3} ±{:.3} {:>7.3} ±{:.3} {:>7.3} ±{:.3} {:>8.3} ±{:.3}",
                r.items_revealed,
                r.acc.0,
                r.acc.1,
                r.auc.0,
                r.auc.1,
                r.map.0,
                r.map.1,
                r.mean_variance.0,
                r.mean_variance.1
            );
        }
    }
    Ok(())
}
