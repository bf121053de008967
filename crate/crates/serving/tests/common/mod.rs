#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use localrqa::corpus::ingest;
use localrqa::pipeline::{Component, RQAPipeline, SimpleRQA, State, PASSAGES_FILE};
use localrqa::synthetic::synthetic_documents;
use localrqa::tokenizer::WhitespaceTokenizer;
use localrqa_serving::protocol::WorkerInfo;
use localrqa_serving::{Controller, ControllerConfig, Worker, WorkerConfig};
use tokio::net::TcpListener;

/// Writes a small synthetic database and returns its directory.
pub fn database(root: &Path) -> std::path::PathBuf {
    let dir = root.join("db");
    std::fs::create_dir_all(&dir).unwrap();
    let store = ingest(&synthetic_documents(20, 7), 400, &WhitespaceTokenizer).unwrap();
    store.save(&dir.join(PASSAGES_FILE)).unwrap();
    dir
}

/// BM25 retrieval followed by the extractive mock answerer.
pub fn mock_pipeline(db: &Path) -> RQAPipeline {
    SimpleRQA::from_scratch(db, "bm25", "mock", 4).unwrap()
}

/// Sleeps before the rest of the pipeline runs.
struct Delay(Duration);

impl Component for Delay {
    fn name(&self) -> String {
        format!("delay-{}ms", self.0.as_millis())
    }

    fn run_input_keys(&self) -> Vec<String> {
        Vec::new()
    }

    fn run(&self, _inputs: &State) -> localrqa::Result<State> {
        std::thread::sleep(self.0);
        Ok(State::new())
    }
}

pub fn slow_pipeline(db: &Path, delay: Duration) -> RQAPipeline {
    let mut components: Vec<Arc<dyn Component>> = vec![Arc::new(Delay(delay))];
    components.extend(mock_pipeline(db).components);
    RQAPipeline::new(components)
}

pub fn config(data_dir: &Path) -> ControllerConfig {
    ControllerConfig::new(data_dir)
}

/// Starts a controller on an ephemeral port and returns its base URL.
pub async fn start_controller(config: ControllerConfig) -> (Controller, String) {
    let controller = Controller::new(config).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(controller.clone().serve(listener));
    (controller, url)
}

pub fn worker_config(worker_id: &str, base_url: String, controller_url: &str) -> WorkerConfig {
    WorkerConfig {
        worker_id: worker_id.into(),
        base_url,
        controller_url: controller_url.into(),
        heartbeat_interval: Duration::from_millis(200),
    }
}

/// Starts a worker on the current runtime and returns its base URL.
pub async fn start_worker(worker_id: &str, pipeline: RQAPipeline, controller_url: &str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let worker = Worker::new(worker_id, pipeline);
    tokio::spawn(worker.run(listener, worker_config(worker_id, url.clone(), controller_url)));
    url
}

/// A worker running on a runtime of its own, so it can be killed abruptly.
pub struct DetachedWorker {
    runtime: Option<tokio::runtime::Runtime>,
    pub url: String,
}

impl DetachedWorker {
    pub fn start(worker_id: &str, pipeline: RQAPipeline, controller_url: &str) -> Self {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        std_listener.set_nonblocking(true).unwrap();
        let _guard = runtime.enter();
        let listener = TcpListener::from_std(std_listener).unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let worker = Worker::new(worker_id, pipeline);
        runtime.spawn(worker.run(listener, worker_config(worker_id, url.clone(), controller_url)));
        DetachedWorker {
            runtime: Some(runtime),
            url,
        }
    }

    /// Drops every task and socket of the worker without any goodbye.
    pub fn kill(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

impl Drop for DetachedWorker {
    fn drop(&mut self) {
        self.kill();
    }
}

pub async fn workers(http: &reqwest::Client, controller_url: &str) -> Vec<WorkerInfo> {
    http.get(format!("{controller_url}/api/workers"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap()
}

/// Waits until `n` workers are registered.
pub async fn wait_for_workers(http: &reqwest::Client, controller_url: &str, n: usize) {
    for _ in 0..200 {
        if workers(http, controller_url).await.len() >= n {
            return;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("{n} workers never registered");
}

pub async fn chat(http: &reqwest::Client, controller_url: &str, session_id: &str, question: &str) -> reqwest::Response {
    http.post(format!("{controller_url}/api/chat"))
        .json(&serde_json::json!({"session_id": session_id, "question": question}))
        .send()
        .await
        .unwrap()
}
