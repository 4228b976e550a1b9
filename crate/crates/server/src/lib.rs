//! HTTP service for live elicitation sessions: a person plays the new user.
//!
//! Each session owns one [`ElicitationSession`] over the shared frozen model
//! and uses the whole catalog as its interactive pool. Requests to one
//! session are serialized by a per-session lock; different sessions proceed
//! concurrently. Session ids and seeds are derived from a root seed and a
//! creation counter, so replaying the request log against a fresh server with
//! the same checkpoint reproduces every response.

mod catalog;
mod log;

pub use catalog::Catalog;
pub use log::RequestLog;

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex as StdMutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use vfm_api as api;
use vfm_core::elicitation::{ElicitationSession, FrozenModel, ItemStats, SessionConfig, Strategy, UpdateReport};
use vfm_core::{seed, Error};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Sessions idle for longer are dropped.
    pub ttl: Duration,
    pub sweep_interval: Duration,
    /// Posterior draws per predictive estimate.
    pub samples: usize,
    pub seed: u64,
    /// Length of the most/least certain lists in summaries.
    pub top_k: usize,
    /// Static files served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            ttl: Duration::from_secs(30 * 60),
            sweep_interval: Duration::from_secs(30),
            samples: 100,
            seed: 0,
            top_k: 5,
            ui_dir: None,
        }
    }
}

struct Entry {
    id: String,
    strategy: Strategy,
    batch_size: usize,
    created: u64,
    last_seen: StdMutex<Instant>,
    session: Arc<Mutex<ElicitationSession>>,
}

impl Entry {
    fn touch(&self) {
        *self.last_seen.lock().unwrap_or_else(|e| e.into_inner()) = Instant::now();
    }

    fn expired(&self, ttl: Duration) -> bool {
        self.last_seen.lock().unwrap_or_else(|e| e.into_inner()).elapsed() > ttl
    }
}

type Reply = (StatusCode, serde_json::Value);

fn reply<T: Serialize>(status: StatusCode, body: &T) -> Reply {
    (status, serde_json::to_value(body).expect("response bodies serialize"))
}

fn fail(status: StatusCode, error: impl Into<String>) -> Reply {
    reply(status, &api::ErrorBody { error: error.into() })
}

fn core_error(e: Error) -> Reply {
    let status = match e {
        Error::NotPending(_) | Error::Elicitation(_) => StatusCode::CONFLICT,
        Error::InvalidArgument(_) | Error::Empty(_) | Error::Parse { .. } => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    fail(status, e.to_string())
}

fn update_info(r: UpdateReport) -> api::UpdateInfo {
    let stop = serde_json::to_value(r.stop)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    api::UpdateInfo {
        iterations: r.iterations,
        objective: r.objective,
        gradient_norm: r.gradient_norm,
        stop,
    }
}

pub struct AppState {
    model: Arc<FrozenModel>,
    titles: HashMap<usize, String>,
    config: ServerConfig,
    sessions: RwLock<HashMap<String, Arc<Entry>>>,
    /// Sessions created so far; held for the whole of a create request.
    created: Mutex<u64>,
    log: Option<RequestLog>,
}

impl AppState {
    pub fn new(catalog: Catalog, config: ServerConfig, log: Option<RequestLog>) -> Arc<Self> {
        Arc::new(AppState {
            model: Arc::new(catalog.model),
            titles: catalog.titles,
            config,
            sessions: RwLock::new(HashMap::new()),
            created: Mutex::new(0),
            log,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    /// Drops idle sessions; returns how many.
    pub fn sweep(&self) -> usize {
        let mut table = self.sessions.write().unwrap_or_else(|e| e.into_inner());
        let before = table.len();
        table.retain(|_, e| !e.expired(self.config.ttl));
        before - table.len()
    }

    fn respond(&self, method: &Method, uri: &Uri, body: &[u8], (status, value): Reply) -> Response {
        if let Some(log) = &self.log {
            log.append(method.as_str(), &uri.to_string(), body, status.as_u16(), &value);
        }
        (status, [(header::CONTENT_TYPE, "application/json")], value.to_string()).into_response()
    }

    /// The live session, or the logged 404 response.
    fn find(&self, id: &str, method: &Method, uri: &Uri, body: &[u8]) -> Result<Arc<Entry>, Response> {
        let table = self.sessions.read().unwrap_or_else(|e| e.into_inner());
        match table.get(id).filter(|e| !e.expired(self.config.ttl)) {
            Some(e) => {
                e.touch();
                Ok(e.clone())
            }
            // logged under the table lock so it cannot overtake a creation
            None => Err(self.respond(
                method,
                uri,
                body,
                fail(StatusCode::NOT_FOUND, format!("no session {id:?}")),
            )),
        }
    }

    fn items(&self, ids: &[usize]) -> Vec<api::Item> {
        ids.iter()
            .map(|&item| api::Item {
                item,
                title: self.titles.get(&item).cloned(),
            })
            .collect()
    }

    fn prediction(&self, s: &ItemStats) -> api::Prediction {
        api::Prediction {
            item: s.item,
            title: self.titles.get(&s.item).cloned(),
            mean_prob: s.mean,
            variance: s.variance,
        }
    }

    fn summary_from(&self, session: &ElicitationSession, stats: &[ItemStats]) -> api::Summary {
        let pool_variance = if stats.is_empty() {
            0.0
        } else {
            stats.iter().map(|s| s.variance).sum::<f64>() / stats.len() as f64
        };
        let mut by_variance: Vec<&ItemStats> = stats.iter().collect();
        by_variance.sort_by(|a, b| a.variance.total_cmp(&b.variance).then(a.item.cmp(&b.item)));
        let k = self.config.top_k;
        let most_certain = by_variance.iter().take(k).map(|s| self.prediction(s)).collect();
        by_variance.sort_by(|a, b| b.variance.total_cmp(&a.variance).then(a.item.cmp(&b.item)));
        let least_certain = by_variance.iter().take(k).map(|s| self.prediction(s)).collect();
        let user = session.user_state();
        api::Summary {
            answered: session.revealed().len(),
            rounds: session.rounds(),
            pool_variance,
            most_certain,
            least_certain,
            user: api::UserPosterior {
                means: user.means,
                scales: user.scales,
            },
        }
    }

    fn summary(&self, session: &ElicitationSession) -> api::Summary {
        let stats = session.item_stats(&session.unrevealed());
        self.summary_from(session, &stats)
    }

    fn open(&self, n: u64, req: api::CreateSession) -> Result<(Entry, Vec<usize>), Reply> {
        let strategy: Strategy = req.strategy.parse().map_err(core_error)?;
        let batch_size = req.batch_size.unwrap_or(api::DEFAULT_BATCH_SIZE);
        let available = self.model.catalog().len();
        if batch_size == 0 || batch_size > available {
            return Err(fail(
                StatusCode::BAD_REQUEST,
                format!("batch_size must be between 1 and {available}"),
            ));
        }
        let session_seed = seed::derive(self.config.seed, &format!("server/session/{n}"));
        let id = format!("s{n}-{:08x}", seed::derive(session_seed, "id") >> 32);
        let mut config = SessionConfig::new(strategy, session_seed);
        config.samples = self.config.samples;
        let mut session = ElicitationSession::live(self.model.clone(), config).map_err(core_error)?;
        let first = session.select_queries(batch_size).map_err(core_error)?;
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let entry = Entry {
            id,
            strategy,
            batch_size,
            created,
            last_seen: StdMutex::new(Instant::now()),
            session: Arc::new(Mutex::new(session)),
        };
        Ok((entry, first))
    }

    fn apply_answers(&self, session: &mut ElicitationSession, batch_size: usize, answers: api::Answers) -> Reply {
        if answers.0.is_empty() {
            return fail(StatusCode::BAD_REQUEST, "no answers given");
        }
        let list: Vec<(usize, f64)> = answers.0.iter().map(|(&j, l)| (j, l.value())).collect();
        let report = match session.answer(&list) {
            Ok(r) => r,
            Err(e) => return core_error(e),
        };
        let next = if session.pending().is_empty() {
            let left = session.pool().len() - session.queried().len();
            if left == 0 {
                Vec::new()
            } else {
                match session.select_queries(batch_size.min(left)) {
                    Ok(q) => q,
                    Err(e) => return core_error(e),
                }
            }
        } else {
            session.pending().to_vec()
        };
        reply(
            StatusCode::OK,
            &api::AnswersAccepted {
                next_queries: self.items(&next),
                summary: self.summary(session),
                update: update_info(report),
            },
        )
    }

    fn predictions(&self, id: &str, session: &ElicitationSession, sort: api::SortOrder) -> Reply {
        let mut stats = session.item_stats(&session.unrevealed());
        match sort {
            api::SortOrder::Confidence => stats.sort_by(|a, b| {
                b.mean
                    .total_cmp(&a.mean)
                    .then(a.variance.total_cmp(&b.variance))
                    .then(a.item.cmp(&b.item))
            }),
            api::SortOrder::Risk => stats.sort_by(|a, b| b.variance.total_cmp(&a.variance).then(a.item.cmp(&b.item))),
        }
        reply(
            StatusCode::OK,
            &api::Predictions {
                session_id: id.to_string(),
                sort,
                predictions: stats.iter().map(|s| self.prediction(s)).collect(),
            },
        )
    }

    fn info(&self, entry: &Entry, session: &ElicitationSession) -> Reply {
        reply(
            StatusCode::OK,
            &api::SessionInfo {
                session_id: entry.id.clone(),
                strategy: entry.strategy.to_string(),
                batch_size: entry.batch_size,
                created: entry.created,
                pending: self.items(session.pending()),
                answered: session
                    .revealed()
                    .iter()
                    .map(|&(item, label)| api::Answered { item, label })
                    .collect(),
                summary: self.summary(session),
            },
        )
    }
}

/// Runs model work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("session task panicked")
}

async fn create_session(State(app): State<Arc<AppState>>, method: Method, uri: Uri, body: Bytes) -> Response {
    // Creation is serialized so ids follow log order.
    let mut count = app.created.lock().await;
    let outcome = match serde_json::from_slice::<api::CreateSession>(&body) {
        Err(e) => Err(fail(StatusCode::BAD_REQUEST, format!("bad request body: {e}"))),
        Ok(req) => {
            let (state, n) = (app.clone(), *count + 1);
            blocking(move || state.open(n, req)).await
        }
    };
    let out = match outcome {
        Err(r) => r,
        Ok((entry, first)) => {
            *count += 1;
            let body = api::SessionCreated {
                session_id: entry.id.clone(),
                strategy: entry.strategy.to_string(),
                batch_size: entry.batch_size,
                created: entry.created,
                first_queries: app.items(&first),
            };
            app.sessions
                .write()
                .unwrap_or_else(|e| e.into_inner())
                .insert(entry.id.clone(), Arc::new(entry));
            reply(StatusCode::CREATED, &body)
        }
    };
    app.respond(&method, &uri, &body, out)
}

async fn post_answers(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    method: Method,
    uri: Uri,
    body: Bytes,
) -> Response {
    let entry = match app.find(&id, &method, &uri, &body) {
        Ok(e) => e,
        Err(r) => return r,
    };
    let mut session = entry.session.clone().lock_owned().await;
    let out = match serde_json::from_slice::<api::Answers>(&body) {
        Err(e) => fail(StatusCode::BAD_REQUEST, format!("bad answers body: {e}")),
        Ok(answers) => {
            let (state, batch) = (app.clone(), entry.batch_size);
            let (s, out) = blocking(move || {
                let out = state.apply_answers(&mut session, batch, answers);
                (session, out)
            })
            .await;
            session = s;
            out
        }
    };
    // still holding the session lock: the log sees this session's requests in order
    let response = app.respond(&method, &uri, &body, out);
    drop(session);
    response
}

fn parse_sort(query: Option<&str>) -> Result<api::SortOrder, Reply> {
    let mut sort = api::SortOrder::default();
    for pair in query.unwrap_or("").split('&').filter(|p| !p.is_empty()) {
        match pair.split_once('=') {
            Some(("sort", v)) => sort = v.parse().map_err(|e: String| fail(StatusCode::BAD_REQUEST, e))?,
            _ => {
                return Err(fail(
                    StatusCode::BAD_REQUEST,
                    format!("unknown query parameter {pair:?}"),
                ))
            }
        }
    }
    Ok(sort)
}

async fn get_predictions(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    RawQuery(query): RawQuery,
    method: Method,
    uri: Uri,
) -> Response {
    let entry = match app.find(&id, &method, &uri, b"") {
        Ok(e) => e,
        Err(r) => return r,
    };
    let session = entry.session.clone().lock_owned().await;
    let (session, out) = match parse_sort(query.as_deref()) {
        Err(r) => (session, r),
        Ok(sort) => {
            let state = app.clone();
            blocking(move || {
                let out = state.predictions(&id, &session, sort);
                (session, out)
            })
            .await
        }
    };
    let response = app.respond(&method, &uri, b"", out);
    drop(session);
    response
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>, method: Method, uri: Uri) -> Response {
    let entry = match app.find(&id, &method, &uri, b"") {
        Ok(e) => e,
        Err(r) => return r,
    };
    let session = entry.session.clone().lock_owned().await;
    let state = app.clone();
    let (session, out) = blocking(move || {
        let out = state.info(&entry, &session);
        (session, out)
    })
    .await;
    let response = app.respond(&method, &uri, b"", out);
    drop(session);
    response
}

async fn health(State(app): State<Arc<AppState>>) -> Response {
    let body = serde_json::json!({
        "sessions": app.session_count(),
        "items": app.model.catalog().len(),
        "model": app.model.fingerprint(),
    });
    (
        StatusCode::OK,
        [(header::CONTENT_TYPE, "application/json")],
        body.to_string(),
    )
        .into_response()
}

pub fn router(app: Arc<AppState>) -> Router {
    let mut router = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/answers", post(post_answers))
        .route("/sessions/{id}/predictions", get(get_predictions));
    if let Some(dir) = &app.config.ui_dir {
        router = router.nest_service("/ui", ServeDir::new(dir));
    }
    router.with_state(app)
}

/// Serves until `shutdown` resolves, sweeping idle sessions in the
/// background.
pub async fn serve(
    listener: TcpListener,
    app: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let app = app.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(app.config.sweep_interval);
            loop {
                tick.tick().await;
                let dropped = app.sweep();
                if dropped > 0 {
                    tracing::info!(dropped, "expired sessions removed");
                }
            }
        })
    };
    let result = axum::serve(listener, router(app))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    result
}
