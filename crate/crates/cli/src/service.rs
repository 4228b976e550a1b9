use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Subcommand};
use tokio::net::TcpListener;

use vfm_api::{Answers, Label, SortOrder};
use vfm_client::{read_log, Client, ClientError};
use vfm_server::{AppState, Catalog, RequestLog, ServerConfig};

use crate::{existing, usage, Failure, Outcome, ServerUrl};

fn runtime() -> Outcome<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

#[derive(Args)]
pub struct ServeArgs {
    /// Checkpoint written by `vfm train` on user/item data.
    #[arg(long)]
    checkpoint: PathBuf,
    /// MovieLens item file (`u.item` or `movies.dat`) for titles.
    #[arg(long)]
    items_file: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Idle session lifetime in seconds.
    #[arg(long, default_value_t = 1800)]
    ttl: u64,
    /// Posterior draws per estimate.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Root seed for session ids and draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append every API request and response here as JSON lines.
    #[arg(long)]
    request_log: Option<PathBuf>,
    /// Static files to serve under /ui.
    #[arg(long)]
    ui: Option<PathBuf>,
}

pub fn serve(args: ServeArgs) -> Outcome {
    let checkpoint = existing(&args.checkpoint)?;
    let items = args.items_file.as_deref().map(existing).transpose()?;
    let ui_dir = args.ui.as_deref().map(existing).transpose()?;
    if args.samples == 0 {
        return usage("--samples must be at least 1");
    }
    let catalog =
        Catalog::load(&checkpoint, items.as_deref()).with_context(|| format!("loading {}", checkpoint.display()))?;
    let log = args
        .request_log
        .as_deref()
        .map(|p| RequestLog::create(p).with_context(|| format!("opening {}", p.display())))
        .transpose()?;
    let config = ServerConfig {
        ttl: Duration::from_secs(args.ttl),
        samples: args.samples,
        seed: args.seed,
        ui_dir,
        ..ServerConfig::default()
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .or_else(|_| usage(format!("bad address {}:{}", args.host, args.port)))?;
    let items_count = catalog.model.catalog().len();
    let app = AppState::new(catalog, config, log);
    runtime()?.block_on(async move {
        let listener = TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("serving {items_count} items on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        vfm_server::serve(listener, app, shutdown).await?;
        Ok::<_, Failure>(())
    })
}

#[derive(Subcommand)]
pub enum SessionCommand {
    /// Open a session and print the first queries.
    Start {
        #[command(flatten)]
        server: ServerUrl,
        /// random, mean or variance.
        #[arg(long, default_value = "variance")]
        strategy: String,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Answer pending queries: `ITEM=LABEL` with LABEL 1/0, yes/no or a number.
    Answer {
        #[command(flatten)]
        server: ServerUrl,
        id: String,
        #[arg(required = true)]
        answers: Vec<String>,
    },
    /// Ranked predictions for every unanswered item.
    Predictions {
        #[command(flatten)]
        server: ServerUrl,
        id: String,
        /// confidence or risk.
        #[arg(long, default_value = "confidence")]
        sort: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Pending queries, answers so far and a summary.
    Show {
        #[command(flatten)]
        server: ServerUrl,
        id: String,
    },
}

fn parse_answer(s: &str) -> Outcome<(usize, Label)> {
    let bad = || usage(format!("answer {s:?} is not ITEM=LABEL"));
    let Some((item, label)) = s.split_once('=') else {
        return bad();
    };
    let Ok(item) = item.trim().parse() else {
        return bad();
    };
    let label = match label.trim().to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" => Label::Bool(true),
        "no" | "n" | "false" => Label::Bool(false),
        other => match other.parse() {
            Ok(x) => Label::Number(x),
            Err(_) => return bad(),
        },
    };
    Ok((item, label))
}

fn client_failure(e: ClientError) -> Failure {
    Failure::Runtime(e.into())
}

fn print_json<T: serde::Serialize>(value: &T) -> Outcome {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn session(cmd: SessionCommand) -> Outcome {
    let rt = runtime()?;
    match cmd {
        SessionCommand::Start {
            server,
            strategy,
            batch,
        } => {
            let created = rt
                .block_on(Client::new(server.server).create_session(&strategy, batch))
                .map_err(client_failure)?;
            print_json(&created)
        }
        SessionCommand::Answer { server, id, answers } => {
            let answers: Answers = answers
                .iter()
                .map(|a| parse_answer(a))
                .collect::<Outcome<Vec<_>>>()?
                .into_iter()
                .collect();
            let accepted = rt
                .block_on(Client::new(server.server).answer(&id, &answers))
                .map_err(client_failure)?;
            print_json(&accepted)
        }
        SessionCommand::Predictions {
            server,
            id,
            sort,
            limit,
        } => {
            let sort: SortOrder = sort.parse().or_else(|e: String| usage(e))?;
            let mut preds = rt
                .block_on(Client::new(server.server).predictions(&id, sort))
                .map_err(client_failure)?;
            if let Some(n) = limit {
                preds.predictions.truncate(n);
            }
            print_json(&preds)
        }
        SessionCommand::Show { server, id } => {
            let info = rt
                .block_on(Client::new(server.server).session(&id))
                .map_err(client_failure)?;
            print_json(&info)
        }
    }
}

#[derive(Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    server: ServerUrl,
    /// Request log written by `vfm serve --request-log`.
    log: PathBuf,
}

pub fn replay(args: ReplayArgs) -> Outcome {
    let records = read_log(existing(&args.log)?).map_err(client_failure)?;
    let client = Client::new(args.server.server);
    let report = runtime()?
        .block_on(vfm_client::replay(&client, &records))
        .map_err(client_failure)?;
    for m in &report.mismatches {
        eprintln!(
            "request {} {}: expected {} {}, got {} {}",
            m.seq, m.uri, m.expected_status, m.expected, m.status, m.got
        );
    }
    println!(
        "{} requests replayed, {} mismatched",
        report.requests,
        report.mismatches.len()
    );
    if report.mismatches.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("replay diverged from the log")))
    }
}
