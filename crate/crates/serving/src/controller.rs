//! The controller: public API, session and rating persistence, and
//! scheduling of chat turns onto registered workers.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use localrqa::evaluation::{load_predictions, PredictionRecord, Verdict};
use localrqa::session::{now_millis, DialogueSession, Role};
use serde::Deserialize;
use tokio::sync::Notify;
use tower_http::services::ServeDir;

use crate::error::{ApiError, ApiResult};
use crate::persistence::{AppendLog, LogRegistry, SessionStore, CHAT_LOG, FEEDBACK_LOG};
use crate::protocol::*;

pub const DEFAULT_HEARTBEAT_TTL: Duration = Duration::from_secs(30);
pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Clone, Debug)]
pub struct ControllerConfig {
    pub data_dir: PathBuf,
    pub workers_expected: usize,
    pub heartbeat_ttl: Duration,
    pub request_timeout: Duration,
    /// When set, workers serving any other pipeline are refused.
    pub expected_identity: Option<String>,
    pub retry_after_secs: u64,
    /// Built web UI bundle, served at `/` when set.
    pub static_dir: Option<PathBuf>,
}

impl ControllerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ControllerConfig {
            data_dir: data_dir.into(),
            workers_expected: 1,
            heartbeat_ttl: DEFAULT_HEARTBEAT_TTL,
            request_timeout: DEFAULT_REQUEST_TIMEOUT,
            expected_identity: None,
            retry_after_secs: 1,
            static_dir: None,
        }
    }
}

#[derive(Clone, Debug)]
struct WorkerEntry {
    registration: RegisterRequest,
    last_heartbeat: Instant,
    outstanding: usize,
    served: u64,
}

/// Outcome of one scheduling decision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pick {
    Worker { worker_id: String, base_url: String },
    /// Live workers exist but all are at their concurrency limit.
    Saturated,
    NoLiveWorkers,
}

/// Worker table and scheduling policy. Time is passed in explicitly so the
/// policy can be driven by a scripted clock.
#[derive(Debug)]
pub struct Registry {
    workers: Vec<WorkerEntry>,
    ttl: Duration,
    cursor: usize,
}

impl Registry {
    pub fn new(ttl: Duration) -> Self {
        Registry {
            workers: Vec::new(),
            ttl,
            cursor: 0,
        }
    }

    /// Drops workers whose last heartbeat is older than the TTL.
    pub fn evict_expired(&mut self, now: Instant) -> Vec<String> {
        let ttl = self.ttl;
        let mut evicted = Vec::new();
        self.workers.retain(|w| {
            let live = now.saturating_duration_since(w.last_heartbeat) <= ttl;
            if !live {
                evicted.push(w.registration.worker_id.clone());
            }
            live
        });
        evicted
    }

    pub fn register(&mut self, registration: RegisterRequest, now: Instant) -> Result<(), String> {
        self.evict_expired(now);
        if let Some(other) = self
            .workers
            .iter()
            .find(|w| w.registration.base_url == registration.base_url && w.registration.worker_id != registration.worker_id)
        {
            return Err(format!(
                "{} is already registered as worker {}",
                registration.base_url, other.registration.worker_id
            ));
        }
        match self.workers.iter_mut().find(|w| w.registration.worker_id == registration.worker_id) {
            Some(w) => {
                w.registration = registration;
                w.last_heartbeat = now;
            }
            None => self.workers.push(WorkerEntry {
                registration,
                last_heartbeat: now,
                outstanding: 0,
                served: 0,
            }),
        }
        Ok(())
    }

    /// Returns false for an unknown (never registered or evicted) worker.
    pub fn heartbeat(&mut self, worker_id: &str, now: Instant) -> bool {
        self.evict_expired(now);
        match self.workers.iter_mut().find(|w| w.registration.worker_id == worker_id) {
            Some(w) => {
                w.last_heartbeat = now;
                true
            }
            None => false,
        }
    }

    pub fn remove(&mut self, worker_id: &str) {
        self.workers.retain(|w| w.registration.worker_id != worker_id);
    }

    /// Least outstanding requests among live, unsaturated workers; ties go
    /// to the first candidate at or after the round-robin cursor.
    pub fn pick(&mut self, now: Instant) -> Pick {
        self.evict_expired(now);
        if self.workers.is_empty() {
            return Pick::NoLiveWorkers;
        }
        let n = self.workers.len();
        let best = (0..n)
            .map(|off| (self.cursor + off) % n)
            .filter(|&i| self.workers[i].outstanding < self.workers[i].registration.max_concurrency.max(1))
            .min_by_key(|&i| (self.workers[i].outstanding, (i + n - self.cursor % n) % n));
        let Some(i) = best else { return Pick::Saturated };
        let w = &mut self.workers[i];
        w.outstanding += 1;
        w.served += 1;
        self.cursor = (i + 1) % n;
        Pick::Worker {
            worker_id: w.registration.worker_id.clone(),
            base_url: w.registration.base_url.clone(),
        }
    }

    pub fn release(&mut self, worker_id: &str) {
        if let Some(w) = self.workers.iter_mut().find(|w| w.registration.worker_id == worker_id) {
            w.outstanding = w.outstanding.saturating_sub(1);
        }
    }

    pub fn live_count(&self, now: Instant) -> usize {
        self.workers
            .iter()
            .filter(|w| now.saturating_duration_since(w.last_heartbeat) <= self.ttl)
            .count()
    }

    /// Live workers only.
    pub fn info(&self, now: Instant) -> Vec<WorkerInfo> {
        self.workers
            .iter()
            .filter(|w| now.saturating_duration_since(w.last_heartbeat) <= self.ttl)
            .map(|w| WorkerInfo {
                worker_id: w.registration.worker_id.clone(),
                base_url: w.registration.base_url.clone(),
                pipeline_identity: w.registration.pipeline_identity.clone(),
                max_concurrency: w.registration.max_concurrency,
                outstanding: w.outstanding,
                served: w.served,
                heartbeat_age_ms: now.saturating_duration_since(w.last_heartbeat).as_millis() as u64,
            })
            .collect()
    }
}

struct Inner {
    config: ControllerConfig,
    registry: Mutex<Registry>,
    freed: Notify,
    sessions: SessionStore,
    feedback: AppendLog<FeedbackRecord>,
    annotations: LogRegistry<Annotation>,
    http: reqwest::Client,
}

/// Marks a scheduled request as finished when dropped.
struct Lease {
    inner: Arc<Inner>,
    worker_id: String,
}

impl Drop for Lease {
    fn drop(&mut self) {
        self.inner.registry.lock().unwrap().release(&self.worker_id);
        self.inner.freed.notify_waiters();
    }
}

#[derive(Clone)]
pub struct Controller {
    inner: Arc<Inner>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(&config.data_dir)?;
        let sessions = SessionStore::open(config.data_dir.join(CHAT_LOG))?;
        let feedback = AppendLog::new(config.data_dir.join(FEEDBACK_LOG));
        let http = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(std::io::Error::other)?;
        Ok(Controller {
            inner: Arc::new(Inner {
                registry: Mutex::new(Registry::new(config.heartbeat_ttl)),
                freed: Notify::new(),
                sessions,
                feedback,
                annotations: LogRegistry::default(),
                http,
                config,
            }),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.inner.config
    }

    pub fn session(&self, session_id: &str) -> Option<DialogueSession> {
        self.inner.sessions.get(session_id)
    }

    pub fn workers(&self) -> Vec<WorkerInfo> {
        self.inner.registry.lock().unwrap().info(Instant::now())
    }

    pub fn router(&self) -> Router {
        let api = Router::new()
            .route("/api/health", get(health))
            .route("/api/chat", post(chat))
            .route("/api/sessions/{session_id}", get(session))
            .route("/api/feedback", post(feedback).get(read_feedback))
            .route("/api/eval/items", get(eval_items))
            .route("/api/eval/annotate", post(annotate))
            .route("/api/eval/summary", get(eval_summary))
            .route("/api/worker/register", post(register))
            .route("/api/worker/heartbeat", post(heartbeat))
            .route("/api/workers", get(workers))
            .with_state(self.clone());
        match &self.inner.config.static_dir {
            Some(dir) => api.fallback_service(ServeDir::new(dir)),
            None => api,
        }
    }

    /// Serves until the listener fails.
    pub async fn serve(self, listener: tokio::net::TcpListener) -> std::io::Result<()> {
        tracing::info!(addr = ?listener.local_addr()?, data_dir = %self.inner.config.data_dir.display(), "controller listening");
        axum::serve(listener, self.router()).await
    }

    async fn acquire(&self, deadline: Instant) -> ApiResult<(Lease, String)> {
        loop {
            let notified = self.inner.freed.notified();
            let pick = self.inner.registry.lock().unwrap().pick(Instant::now());
            match pick {
                Pick::Worker { worker_id, base_url } => {
                    let lease = Lease {
                        inner: self.inner.clone(),
                        worker_id,
                    };
                    return Ok((lease, base_url));
                }
                Pick::NoLiveWorkers => {
                    return Err(ApiError::Unavailable {
                        retry_after_secs: self.inner.config.retry_after_secs,
                    })
                }
                Pick::Saturated => {
                    let wait = deadline.saturating_duration_since(Instant::now());
                    if wait.is_zero() {
                        return Err(ApiError::GatewayTimeout("all workers stayed busy".into()));
                    }
                    // a short cap so TTL expiry is noticed even without releases
                    let _ = tokio::time::timeout(wait.min(Duration::from_millis(250)), notified).await;
                }
            }
        }
    }

    async fn forward(&self, base_url: &str, request: &GenerateRequest, remaining: Duration) -> ApiResult<GenerateResponse> {
        let url = format!("{}/worker/generate", base_url.trim_end_matches('/'));
        let resp = self
            .inner
            .http
            .post(&url)
            .timeout(remaining)
            .json(request)
            .send()
            .await
            .map_err(|e| forward_error(&url, e))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(ApiError::Internal(format!("worker at {base_url} answered {status}: {body}")));
        }
        resp.json().await.map_err(|e| forward_error(&url, e))
    }
}

fn forward_error(url: &str, e: reqwest::Error) -> ApiError {
    ApiError::GatewayTimeout(if e.is_timeout() {
        format!("worker {url} timed out")
    } else {
        format!("worker {url} failed: {e}")
    })
}

async fn health(State(c): State<Controller>) -> Json<Health> {
    let live = c.inner.registry.lock().unwrap().live_count(Instant::now());
    Json(Health {
        live_workers: live,
        workers_expected: c.inner.config.workers_expected,
        ready: live >= c.inner.config.workers_expected,
    })
}

async fn chat(State(c): State<Controller>, Json(req): Json<ChatRequest>) -> ApiResult<Json<ChatResponse>> {
    if req.question.trim().is_empty() {
        return Err(ApiError::BadRequest("question must not be empty".into()));
    }
    if req.session_id.trim().is_empty() {
        return Err(ApiError::BadRequest("session_id must not be empty".into()));
    }
    let deadline = Instant::now() + c.inner.config.request_timeout;
    let lock = c.inner.sessions.session_lock(&req.session_id);
    let _turn = lock.lock().await;
    let session = c
        .inner
        .sessions
        .get(&req.session_id)
        .unwrap_or_else(|| DialogueSession::new(req.session_id.clone()));

    let (lease, base_url) = c.acquire(deadline).await?;
    let request = GenerateRequest {
        question: req.question.clone(),
        session: session.clone(),
    };
    let remaining = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
    let result = c.forward(&base_url, &request, remaining).await;
    if let Err(ApiError::GatewayTimeout(msg)) = &result {
        if !msg.contains("timed out") {
            // the worker is gone; stop routing to it until it registers again
            tracing::warn!(worker = %lease.worker_id, "removing unreachable worker");
            c.inner.registry.lock().unwrap().remove(&lease.worker_id);
        }
    }
    drop(lease);
    let generated = result?;

    let mut session = session;
    session.push(Role::User, req.question).map_err(ApiError::from)?;
    session.push(Role::Assistant, generated.answer.clone()).map_err(ApiError::from)?;
    let turn_index = session.turns.len() - 1;
    c.inner.sessions.put(session)?;
    Ok(Json(ChatResponse {
        answer: generated.answer,
        sources: generated.sources,
        turn_index,
    }))
}

async fn session(State(c): State<Controller>, UrlPath(session_id): UrlPath<String>) -> ApiResult<Json<DialogueSession>> {
    c.inner
        .sessions
        .get(&session_id)
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("no session {session_id}")))
}

async fn feedback(State(c): State<Controller>, Json(req): Json<FeedbackRequest>) -> ApiResult<Json<Ack>> {
    let session = c
        .inner
        .sessions
        .get(&req.session_id)
        .ok_or_else(|| ApiError::BadRequest(format!("no session {}", req.session_id)))?;
    match session.turns.get(req.turn_index) {
        Some(t) if t.role == Role::Assistant => {}
        Some(_) => return Err(ApiError::BadRequest(format!("turn {} is a user turn", req.turn_index))),
        None => return Err(ApiError::BadRequest(format!("session has no turn {}", req.turn_index))),
    }
    let helpfulness = req.helpfulness.unwrap_or_default();
    if !helpfulness.is_valid() {
        return Err(ApiError::BadRequest("helpfulness must be 1 to 5 or \"unrated\"".into()));
    }
    c.inner.feedback.append(&FeedbackRecord {
        session_id: req.session_id,
        turn_index: req.turn_index,
        correctness: req.correctness.unwrap_or_default(),
        helpfulness,
        timestamp: now_millis(),
    })?;
    Ok(Json(Ack::yes()))
}

#[derive(Deserialize)]
struct SessionQuery {
    session_id: String,
}

/// Latest rating per assistant turn of one session.
async fn read_feedback(State(c): State<Controller>, Query(q): Query<SessionQuery>) -> ApiResult<Json<Vec<FeedbackRecord>>> {
    let mut latest: BTreeMap<usize, FeedbackRecord> = BTreeMap::new();
    for r in c.inner.feedback.read_all()? {
        if r.session_id == q.session_id {
            latest.insert(r.turn_index, r);
        }
    }
    Ok(Json(latest.into_values().collect()))
}

fn eval_file(c: &Controller, file: &str) -> ApiResult<PathBuf> {
    let rel = Path::new(file);
    if file.is_empty() || rel.components().any(|p| !matches!(p, Component::Normal(_))) {
        return Err(ApiError::BadRequest(format!("`{file}` must be a relative path inside the data directory")));
    }
    let path = c.inner.config.data_dir.join(rel);
    if !path.is_file() {
        return Err(ApiError::NotFound(format!("no predictions file `{file}`")));
    }
    Ok(path)
}

fn annotations_path(predictions: &Path) -> PathBuf {
    let mut name = predictions.as_os_str().to_owned();
    name.push(".annotations.jsonl");
    name.into()
}

struct EvalRun {
    records: Vec<PredictionRecord>,
    latest: BTreeMap<usize, Annotation>,
}

impl EvalRun {
    fn load(c: &Controller, file: &str) -> ApiResult<(Self, Arc<AppendLog<Annotation>>)> {
        let path = eval_file(c, file)?;
        let records = load_predictions(&path).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let log = c.inner.annotations.get(&annotations_path(&path));
        let latest = log.read_all()?.into_iter().map(|a| (a.record_index, a)).collect();
        Ok((EvalRun { records, latest }, log))
    }

    fn progress(&self) -> EvalProgress {
        let annotated = self.latest.keys().filter(|&&i| i < self.records.len()).count();
        EvalProgress {
            total: self.records.len(),
            annotated,
            complete: !self.records.is_empty() && annotated == self.records.len(),
        }
    }
}

async fn eval_items(State(c): State<Controller>, Query(q): Query<EvalItemsQuery>) -> ApiResult<Json<EvalItem>> {
    let (run, _) = EvalRun::load(&c, &q.file)?;
    let record = run
        .records
        .get(q.cursor)
        .cloned()
        .ok_or_else(|| ApiError::BadRequest(format!("cursor {} is outside 0..{}", q.cursor, run.records.len())))?;
    Ok(Json(EvalItem {
        record_index: q.cursor,
        record,
        annotation: run.latest.get(&q.cursor).cloned(),
        progress: run.progress(),
    }))
}

async fn annotate(State(c): State<Controller>, Json(req): Json<AnnotateRequest>) -> ApiResult<Json<AnnotateResponse>> {
    let (mut run, log) = EvalRun::load(&c, &req.file)?;
    if req.record_index >= run.records.len() {
        return Err(ApiError::BadRequest(format!(
            "record_index {} is outside 0..{}",
            req.record_index,
            run.records.len()
        )));
    }
    let annotation = Annotation {
        record_index: req.record_index,
        accuracy: req.accuracy,
        notes: req.notes,
        timestamp: now_millis(),
    };
    log.append(&annotation)?;
    run.latest.insert(annotation.record_index, annotation);
    Ok(Json(AnnotateResponse {
        ok: true,
        progress: run.progress(),
    }))
}

#[derive(Deserialize)]
struct FileQuery {
    file: String,
}

async fn eval_summary(State(c): State<Controller>, Query(q): Query<FileQuery>) -> ApiResult<Json<EvalSummaryResponse>> {
    let (run, _) = EvalRun::load(&c, &q.file)?;
    let (mut correct, mut incorrect) = (0, 0);
    for a in run.latest.values().filter(|a| a.record_index < run.records.len()) {
        match a.accuracy {
            Verdict::Correct => correct += 1,
            Verdict::Incorrect => incorrect += 1,
        }
    }
    let judged = correct + incorrect;
    Ok(Json(EvalSummaryResponse {
        progress: run.progress(),
        correct,
        incorrect,
        accuracy: (judged > 0).then(|| correct as f64 / judged as f64 * 100.0),
    }))
}

async fn register(State(c): State<Controller>, Json(req): Json<RegisterRequest>) -> ApiResult<Json<Ack>> {
    if let Some(expected) = &c.inner.config.expected_identity {
        if *expected != req.pipeline_identity {
            return Err(ApiError::Conflict(format!(
                "worker serves `{}`, controller expects `{expected}`",
                req.pipeline_identity
            )));
        }
    }
    let worker_id = req.worker_id.clone();
    c.inner
        .registry
        .lock()
        .unwrap()
        .register(req, Instant::now())
        .map_err(ApiError::Conflict)?;
    c.inner.freed.notify_waiters();
    tracing::info!(%worker_id, "worker registered");
    Ok(Json(Ack::yes()))
}

async fn heartbeat(State(c): State<Controller>, Json(req): Json<HeartbeatRequest>) -> ApiResult<Json<Ack>> {
    if c.inner.registry.lock().unwrap().heartbeat(&req.worker_id, Instant::now()) {
        Ok(Json(Ack::yes()))
    } else {
        Err(ApiError::NotFound(format!("worker {} is not registered", req.worker_id)))
    }
}

async fn workers(State(c): State<Controller>) -> Json<Vec<WorkerInfo>> {
    Json(c.workers())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(id: &str, url: &str, max: usize) -> RegisterRequest {
        RegisterRequest {
            worker_id: id.into(),
            base_url: url.into(),
            pipeline_identity: "p".into(),
            max_concurrency: max,
        }
    }

    fn picked(p: Pick) -> String {
        match p {
            Pick::Worker { worker_id, .. } => worker_id,
            other => panic!("expected a worker, got {other:?}"),
        }
    }

    #[test]
    fn round_robin_on_ties() {
        let t0 = Instant::now();
        let mut r = Registry::new(Duration::from_secs(30));
        r.register(reg("a", "http://a", 4), t0).unwrap();
        r.register(reg("b", "http://b", 4), t0).unwrap();
        let mut order = Vec::new();
        for _ in 0..4 {
            let id = picked(r.pick(t0));
            r.release(&id);
            order.push(id);
        }
        assert_eq!(order, ["a", "b", "a", "b"]);
    }

    #[test]
    fn least_outstanding_wins() {
        let t0 = Instant::now();
        let mut r = Registry::new(Duration::from_secs(30));
        r.register(reg("a", "http://a", 4), t0).unwrap();
        r.register(reg("b", "http://b", 4), t0).unwrap();
        assert_eq!(picked(r.pick(t0)), "a");
        assert_eq!(picked(r.pick(t0)), "b");
        assert_eq!(picked(r.pick(t0)), "a");
        r.release("b");
        assert_eq!(picked(r.pick(t0)), "b");
    }

    #[test]
    fn saturation_and_empty() {
        let t0 = Instant::now();
        let mut r = Registry::new(Duration::from_secs(30));
        assert_eq!(r.pick(t0), Pick::NoLiveWorkers);
        r.register(reg("a", "http://a", 1), t0).unwrap();
        picked(r.pick(t0));
        assert_eq!(r.pick(t0), Pick::Saturated);
        r.release("a");
        picked(r.pick(t0));
    }

    #[test]
    fn conflicting_base_url_is_refused() {
        let t0 = Instant::now();
        let mut r = Registry::new(Duration::from_secs(30));
        r.register(reg("a", "http://a", 1), t0).unwrap();
        r.register(reg("a", "http://a", 2), t0).unwrap();
        assert!(r.register(reg("b", "http://a", 1), t0).is_err());
        assert_eq!(r.info(t0).len(), 1);
    }

    /// Scripted clock: every decision over a random schedule of heartbeats
    /// and picks must route only to workers whose heartbeat is within the TTL.
    #[test]
    fn never_routes_to_an_expired_worker() {
        let ttl = Duration::from_secs(30);
        let t0 = Instant::now();
        let mut r = Registry::new(ttl);
        let mut last_beat: BTreeMap<String, Instant> = BTreeMap::new();
        for id in ["a", "b", "c"] {
            r.register(reg(id, &format!("http://{id}"), 8), t0).unwrap();
            last_beat.insert(id.into(), t0);
        }
        let mut state = 12345u64;
        let mut rand = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let mut now = t0;
        for _ in 0..5000 {
            now += Duration::from_millis(rand() % 4000);
            match rand() % 4 {
                0 => {
                    let id = ["a", "b", "c"][(rand() % 3) as usize];
                    if r.heartbeat(id, now) {
                        last_beat.insert(id.into(), now);
                    } else {
                        r.register(reg(id, &format!("http://{id}"), 8), now).unwrap();
                        last_beat.insert(id.into(), now);
                    }
                }
                _ => match r.pick(now) {
                    Pick::Worker { worker_id, .. } => {
                        assert!(now.duration_since(last_beat[&worker_id]) <= ttl, "routed to expired {worker_id}");
                        r.release(&worker_id);
                    }
                    Pick::NoLiveWorkers => {
                        assert!(last_beat.values().all(|&b| now.duration_since(b) > ttl));
                    }
                    Pick::Saturated => panic!("never saturated with releases"),
                },
            }
        }
    }
}
