//! JSON bodies exchanged with the elicitation service.
//!
//! `schema.json` next to this crate describes the same shapes for clients
//! that do not link against it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_BATCH_SIZE: usize = 4;

/// The JSON schema of every body below.
pub const SCHEMA: &str = include_str!("../schema.json");

/// `POST /sessions`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    /// `random`, `mean` or `variance`.
    pub strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub strategy: String,
    pub batch_size: usize,
    /// Unix seconds.
    pub created: u64,
    pub first_queries: Vec<Item>,
}

/// An answer: `true`/`false` or a number (0/1 for binary models).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Bool(bool),
    Number(f64),
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Bool(b) => f64::from(u8::from(b)),
            Label::Number(x) => x,
        }
    }
}

/// `POST /sessions/{id}/answers`: labels keyed by item id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Answers(pub BTreeMap<usize, Label>);

impl<L: Into<Label>> FromIterator<(usize, L)> for Answers {
    fn from_iter<T: IntoIterator<Item = (usize, L)>>(iter: T) -> Self {
        Answers(iter.into_iter().map(|(j, l)| (j, l.into())).collect())
    }
}

impl From<bool> for Label {
    fn from(b: bool) -> Self {
        Label::Bool(b)
    }
}

impl From<f64> for Label {
    fn from(x: f64) -> Self {
        Label::Number(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    /// Predictive mean response (a probability for binary models).
    pub mean_prob: f64,
    /// Variance of the raw score across posterior draws.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserPosterior {
    /// Bias first, then the embedding.
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub answered: usize,
    pub rounds: usize,
    /// Mean score variance over items not yet answered.
    pub pool_variance: f64,
    /// Lowest-variance unanswered items.
    pub most_certain: Vec<Prediction>,
    /// Highest-variance unanswered items.
    pub least_certain: Vec<Prediction>,
    pub user: UserPosterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateInfo {
    pub iterations: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    /// `converged`, `patience` or `max-iterations`.
    pub stop: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswersAccepted {
    /// Still-unanswered queries if some remain, else the next batch. Empty
    /// once every item has been asked about.
    pub next_queries: Vec<Item>,
    pub summary: Summary,
    pub update: UpdateInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Answered {
    pub item: usize,
    pub label: f64,
}

/// `GET /sessions/{id}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub strategy: String,
    pub batch_size: usize,
    pub created: u64,
    pub pending: Vec<Item>,
    pub answered: Vec<Answered>,
    pub summary: Summary,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortOrder {
    /// Highest predicted mean first.
    #[default]
    Confidence,
    /// Highest variance first.
    Risk,
}

impl SortOrder {
    pub fn name(self) -> &'static str {
        match self {
            SortOrder::Confidence => "confidence",
            SortOrder::Risk => "risk",
        }
    }
}

impl std::str::FromStr for SortOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "confidence" => Ok(SortOrder::Confidence),
            "risk" => Ok(SortOrder::Risk),
            _ => Err(format!("unknown sort {s:?} (expected confidence or risk)")),
        }
    }
}

/// `GET /sessions/{id}/predictions?sort=confidence|risk`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub session_id: String,
    pub sort: SortOrder,
    /// Every unanswered item.
    pub predictions: Vec<Prediction>,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// One line of the server's request log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub method: String,
    /// Path and query string.
    pub uri: String,
    /// Raw request body; empty when there was none.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub body: String,
    pub status: u16,
    pub response: serde_json::Value,
}
