//! JSON bodies of every endpoint.

use localrqa::corpus::Passage;
use localrqa::evaluation::{PredictionRecord, Verdict};
use localrqa::session::DialogueSession;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub session_id: String,
    pub question: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub passage_id: String,
    pub content: String,
    pub source: String,
}

impl From<&Passage> for SourceRef {
    fn from(p: &Passage) -> Self {
        SourceRef {
            passage_id: p.passage_id.clone(),
            content: p.content.clone(),
            source: p.source.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub answer: String,
    pub sources: Vec<SourceRef>,
    /// Index of the assistant turn in the session, the handle for feedback.
    pub turn_index: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    Correct,
    Incorrect,
    #[default]
    Unrated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unrated {
    Unrated,
}

/// A 1 to 5 score or `"unrated"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Helpfulness {
    Score(u8),
    Unrated(Unrated),
}

impl Default for Helpfulness {
    fn default() -> Self {
        Helpfulness::Unrated(Unrated::Unrated)
    }
}

impl Helpfulness {
    pub fn is_valid(&self) -> bool {
        match self {
            Helpfulness::Score(s) => (1..=5).contains(s),
            Helpfulness::Unrated(_) => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub session_id: String,
    pub turn_index: usize,
    #[serde(default)]
    pub correctness: Option<Correctness>,
    #[serde(default)]
    pub helpfulness: Option<Helpfulness>,
}

/// One line of the feedback log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub session_id: String,
    pub turn_index: usize,
    pub correctness: Correctness,
    pub helpfulness: Helpfulness,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}

impl Ack {
    pub fn yes() -> Self {
        Ack { ok: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItemsQuery {
    pub file: String,
    #[serde(default)]
    pub cursor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProgress {
    pub total: usize,
    pub annotated: usize,
    pub complete: bool,
}

/// Reply to an annotation: `ok` plus the run's progress.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotateResponse {
    pub ok: bool,
    #[serde(flatten)]
    pub progress: EvalProgress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub record_index: usize,
    pub record: PredictionRecord,
    /// The latest annotation of this record, if any.
    pub annotation: Option<Annotation>,
    pub progress: EvalProgress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotateRequest {
    pub file: String,
    pub record_index: usize,
    pub accuracy: Verdict,
    #[serde(default)]
    pub notes: String,
}

/// One line of `<file>.annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub record_index: usize,
    pub accuracy: Verdict,
    pub notes: String,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummaryResponse {
    pub progress: EvalProgress,
    pub correct: usize,
    pub incorrect: usize,
    /// Percentage of annotated records judged correct; `None` before any annotation.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub worker_id: String,
    pub base_url: String,
    pub pipeline_identity: String,
    pub max_concurrency: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatRequest {
    pub worker_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub worker_id: String,
    pub base_url: String,
    pub pipeline_identity: String,
    pub max_concurrency: usize,
    pub outstanding: usize,
    pub served: u64,
    /// Milliseconds since the last heartbeat.
    pub heartbeat_age_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub question: String,
    pub session: DialogueSession,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub answer: String,
    pub sources: Vec<SourceRef>,
    pub worker_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub live_workers: usize,
    pub workers_expected: usize,
    pub ready: bool,
}
