//! Async client for the elicitation service, plus request-log replay.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde_json::Value;
use thiserror::Error;

use vfm_api::{
    Answers, AnswersAccepted, CreateSession, ErrorBody, LogRecord, Predictions, SessionCreated, SessionInfo, SortOrder,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Http(#[from] reqwest::Error),

    /// The server answered with a non-2xx status.
    #[error("server returned {status}: {message}")]
    Status { status: u16, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("request log line {line}: {source}")]
    Log { line: usize, source: serde_json::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("unsupported method {0:?} in request log")]
    Method(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
            _ => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// Sends a request and returns the status and JSON body, whatever the
    /// status.
    pub async fn send_raw(&self, method: &str, uri: &str, body: &str) -> Result<(u16, Value)> {
        let method = Method::from_bytes(method.as_bytes()).map_err(|_| ClientError::Method(method.to_string()))?;
        let mut req = self.http.request(method, format!("{}{uri}", self.base));
        if !body.is_empty() {
            req = req
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.to_string());
        }
        let resp = req.send().await?;
        let status = resp.status().as_u16();
        let bytes = resp.bytes().await?;
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes)?
        };
        Ok((status, value))
    }

    async fn call<T: DeserializeOwned>(&self, method: &str, uri: &str, body: &str) -> Result<T> {
        let (status, value) = self.send_raw(method, uri, body).await?;
        if !StatusCode::from_u16(status).is_ok_and(|s| s.is_success()) {
            let message = serde_json::from_value::<ErrorBody>(value.clone())
                .map(|e| e.error)
                .unwrap_or_else(|_| value.to_string());
            return Err(ClientError::Status { status, message });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub async fn create_session(&self, strategy: &str, batch_size: Option<usize>) -> Result<SessionCreated> {
        let body = serde_json::to_string(&CreateSession {
            strategy: strategy.to_string(),
            batch_size,
        })?;
        self.call("POST", "/sessions", &body).await
    }

    pub async fn answer(&self, session: &str, answers: &Answers) -> Result<AnswersAccepted> {
        self.call(
            "POST",
            &format!("/sessions/{session}/answers"),
            &serde_json::to_string(answers)?,
        )
        .await
    }

    pub async fn predictions(&self, session: &str, sort: SortOrder) -> Result<Predictions> {
        self.call(
            "GET",
            &format!("/sessions/{session}/predictions?sort={}", sort.name()),
            "",
        )
        .await
    }

    pub async fn session(&self, session: &str) -> Result<SessionInfo> {
        self.call("GET", &format!("/sessions/{session}"), "").await
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ClientError::Log { line: n + 1, source })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub seq: u64,
    pub uri: String,
    pub expected_status: u16,
    pub status: u16,
    pub expected: Value,
    pub got: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub requests: usize,
    pub mismatches: Vec<Mismatch>,
}

/// Drops `created` timestamps, the only wall-clock values in responses.
fn normalize(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("created");
            map.values_mut().for_each(normalize);
        }
        Value::Array(items) => items.iter_mut().for_each(normalize),
        _ => {}
    }
}

/// Re-sends every logged request in order and compares the responses.
pub async fn replay(client: &Client, records: &[LogRecord]) -> Result<ReplayReport> {
    let mut report = ReplayReport::default();
    for rec in records {
        let (status, mut got) = client.send_raw(&rec.method, &rec.uri, &rec.body).await?;
        let mut expected = rec.response.clone();
        normalize(&mut got);
        normalize(&mut expected);
        report.requests += 1;
        if status != rec.status || got != expected {
            report.mismatches.push(Mismatch {
                seq: rec.seq,
                uri: rec.uri.clone(),
                expected_status: rec.status,
                status,
                expected,
                got,
            });
        }
    }
    Ok(report)
}
