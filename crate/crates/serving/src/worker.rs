//! A worker: serves one pipeline over `POST /worker/generate` and keeps
//! itself registered with the controller.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use localrqa::pipeline::RQAPipeline;
use tokio::sync::Semaphore;

use crate::error::{ApiError, ApiResult};
use crate::protocol::{GenerateRequest, GenerateResponse, HeartbeatRequest, RegisterRequest, SourceRef};

#[derive(Clone, Debug)]
pub struct WorkerConfig {
    pub worker_id: String,
    /// Address the controller should use to reach this worker.
    pub base_url: String,
    pub controller_url: String,
    pub heartbeat_interval: Duration,
}

#[derive(Clone)]
pub struct Worker {
    id: String,
    pipeline: Arc<RQAPipeline>,
    identity: String,
    permits: Arc<Semaphore>,
    max_concurrency: usize,
}

impl Worker {
    pub fn new(worker_id: impl Into<String>, pipeline: RQAPipeline) -> Self {
        let max_concurrency = pipeline.max_concurrency();
        Worker {
            id: worker_id.into(),
            identity: pipeline.identity(),
            pipeline: Arc::new(pipeline),
            permits: Arc::new(Semaphore::new(max_concurrency)),
            max_concurrency,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/worker/generate", post(generate))
            .route("/worker/health", get(|| async { "ok" }))
            .with_state(self.clone())
    }

    fn registration(&self, base_url: &str) -> RegisterRequest {
        RegisterRequest {
            worker_id: self.id.clone(),
            base_url: base_url.to_string(),
            pipeline_identity: self.identity.clone(),
            max_concurrency: self.max_concurrency,
        }
    }

    /// Registers once. A 409 (identity or address conflict) is returned as an error.
    pub async fn register(&self, http: &reqwest::Client, config: &WorkerConfig) -> Result<(), String> {
        let url = format!("{}/api/worker/register", config.controller_url.trim_end_matches('/'));
        let resp = http
            .post(&url)
            .json(&self.registration(&config.base_url))
            .send()
            .await
            .map_err(|e| format!("cannot reach controller: {e}"))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(format!("controller refused registration: {} {}", resp.status(), resp.text().await.unwrap_or_default()))
        }
    }

    /// Registers (retrying until the controller is reachable), then sends
    /// heartbeats forever, re-registering whenever the controller has
    /// forgotten this worker.
    pub async fn keep_registered(self, config: WorkerConfig) {
        let http = reqwest::Client::new();
        let beat_url = format!("{}/api/worker/heartbeat", config.controller_url.trim_end_matches('/'));
        let mut registered = false;
        loop {
            if !registered {
                match self.register(&http, &config).await {
                    Ok(()) => {
                        tracing::info!(worker = %self.id, controller = %config.controller_url, "registered");
                        registered = true;
                    }
                    Err(e) => tracing::warn!(worker = %self.id, "{e}"),
                }
            } else {
                let beat = HeartbeatRequest { worker_id: self.id.clone() };
                match http.post(&beat_url).json(&beat).send().await {
                    Ok(r) if r.status() == reqwest::StatusCode::NOT_FOUND => registered = false,
                    Ok(_) => {}
                    Err(e) => tracing::warn!(worker = %self.id, "heartbeat failed: {e}"),
                }
            }
            tokio::time::sleep(if registered { config.heartbeat_interval } else { Duration::from_millis(500) }).await;
        }
    }

    /// Serves the worker API and keeps it registered.
    pub async fn run(self, listener: tokio::net::TcpListener, config: WorkerConfig) -> std::io::Result<()> {
        tracing::info!(worker = %self.id, addr = ?listener.local_addr()?, identity = %self.identity, "worker listening");
        let heartbeat = tokio::spawn(self.clone().keep_registered(config));
        let served = axum::serve(listener, self.router()).await;
        heartbeat.abort();
        served
    }
}

async fn generate(State(w): State<Worker>, Json(req): Json<GenerateRequest>) -> ApiResult<Json<GenerateResponse>> {
    if req.question.trim().is_empty() {
        return Err(ApiError::BadRequest("question must not be empty".into()));
    }
    let _permit = w.permits.clone().acquire_owned().await.map_err(|e| ApiError::Internal(e.to_string()))?;
    let pipeline = w.pipeline.clone();
    let out = tokio::task::spawn_blocking(move || pipeline.qa(vec![req.question], vec![req.session]))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(GenerateResponse {
        answer: out.batch_answers.into_iter().next().unwrap_or_default(),
        sources: out
            .batch_source_documents
            .first()
            .map(|docs| docs.iter().map(SourceRef::from).collect())
            .unwrap_or_default(),
        worker_id: w.id.clone(),
    }))
}
