//! A controller with two in-process workers serving a BM25 + mock-answer
//! pipeline: chats over HTTP, rates an answer, then lists the workers.
//!
//! `cargo run --example chat_controller -- [data_dir]`
//!
//! Pass `--hold` to keep serving afterwards and point the web UI at the
//! printed address.

use std::path::PathBuf;
use std::time::Duration;

use localrqa::corpus::{ingest, DEFAULT_MAX_PASSAGE_TOKENS};
use localrqa::pipeline::{SimpleRQA, PASSAGES_FILE};
use localrqa::synthetic::synthetic_documents;
use localrqa::tokenizer::WhitespaceTokenizer;
use localrqa_serving::protocol::{ChatResponse, WorkerInfo};
use localrqa_serving::{Controller, ControllerConfig, Worker, WorkerConfig};
use serde_json::json;
use tokio::net::TcpListener;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt().with_env_filter("info").init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let hold = args.iter().any(|a| a == "--hold");
    let data_dir = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("rqa-chat"));
    let db = data_dir.join("db");
    std::fs::create_dir_all(&db)?;
    let store = ingest(&synthetic_documents(40, 5), DEFAULT_MAX_PASSAGE_TOKENS, &WhitespaceTokenizer)?;
    store.save(&db.join(PASSAGES_FILE))?;

    let mut config = ControllerConfig::new(data_dir.join("runs"));
    config.workers_expected = 2;
    let controller = Controller::new(config)?;
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let url = format!("http://{}", listener.local_addr()?);
    tokio::spawn(controller.clone().serve(listener));

    for id in ["worker-a", "worker-b"] {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let base_url = format!("http://{}", listener.local_addr()?);
        let worker = Worker::new(id, SimpleRQA::from_scratch(&db, "bm25", "mock", 4)?);
        let config = WorkerConfig {
            worker_id: id.into(),
            base_url,
            controller_url: url.clone(),
            heartbeat_interval: Duration::from_secs(10),
        };
        tokio::spawn(worker.run(listener, config));
    }
    let http = reqwest::Client::new();
    while controller.workers().len() < 2 {
        tokio::time::sleep(Duration::from_millis(50)).await;
    }

    let entity = store.passages()[0].content.split_whitespace().next().unwrap_or("it").to_string();
    for question in [format!("what is {entity} known for"), format!("who founded {entity}")] {
        let resp: ChatResponse = http
            .post(format!("{url}/api/chat"))
            .json(&json!({"session_id": "demo", "question": question}))
            .send()
            .await?
            .error_for_status()?
            .json()
            .await?;
        println!("Q: {question}\nA: {} (turn {}, {} sources)", resp.answer, resp.turn_index, resp.sources.len());
    }
    http.post(format!("{url}/api/feedback"))
        .json(&json!({"session_id": "demo", "turn_index": 3, "correctness": "correct", "helpfulness": 4}))
        .send()
        .await?
        .error_for_status()?;

    let workers: Vec<WorkerInfo> = http.get(format!("{url}/api/workers")).send().await?.json().await?;
    for w in &workers {
        println!("{} served {} ({})", w.worker_id, w.served, w.pipeline_identity);
    }
    println!("logs in {}", data_dir.join("runs").display());
    if hold {
        println!("controller at {url}; Ctrl-C to stop");
        tokio::signal::ctrl_c().await?;
    }
    Ok(())
}
