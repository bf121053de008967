mod common;

use std::time::Duration;

use common::*;
use localrqa::evaluation::{save_predictions, PredictionRecord};
use localrqa::session::{DialogueSession, Role};
use localrqa_serving::persistence::{CHAT_LOG, FEEDBACK_LOG};
use localrqa_serving::protocol::{AnnotateResponse, ChatResponse, EvalItem, EvalSummaryResponse, FeedbackRecord, Health};
use reqwest::StatusCode;
use serde_json::{json, Value};

fn lines(path: &std::path::Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn chat_creates_and_extends_sessions() {
    let tmp = tempfile::tempdir().unwrap();
    let db = database(tmp.path());
    let (_c, url) = start_controller(config(&tmp.path().join("runs"))).await;
    start_worker("w1", mock_pipeline(&db), &url).await;
    let http = reqwest::Client::new();
    wait_for_workers(&http, &url, 1).await;

    let health: Health = http.get(format!("{url}/api/health")).send().await.unwrap().json().await.unwrap();
    assert!(health.ready);

    let first: ChatResponse = chat(&http, &url, "s1", "what is the river famous for").await.json().await.unwrap();
    assert_eq!(first.turn_index, 1);
    assert_eq!(first.sources.len(), 4);
    assert!(!first.answer.is_empty());
    assert!(first.sources.iter().all(|s| !s.passage_id.is_empty() && !s.content.is_empty() && !s.source.is_empty()));

    let second: ChatResponse = chat(&http, &url, "s1", "and the castle").await.json().await.unwrap();
    assert_eq!(second.turn_index, 3);

    let session: DialogueSession = http.get(format!("{url}/api/sessions/s1")).send().await.unwrap().json().await.unwrap();
    let roles: Vec<Role> = session.turns.iter().map(|t| t.role).collect();
    assert_eq!(roles, [Role::User, Role::Assistant, Role::User, Role::Assistant]);
    assert_eq!(session.turns[3].text, second.answer);

    let log = lines(&tmp.path().join("runs").join(CHAT_LOG));
    assert_eq!(log.len(), 1, "one line per session, rewritten in place");
    assert_eq!(log[0]["session_id"], "s1");
    assert_eq!(log[0]["turns"].as_array().unwrap().len(), 4);
    for turn in log[0]["turns"].as_array().unwrap() {
        assert!(turn["role"].is_string() && turn["text"].is_string() && turn["ts"].is_u64());
    }

    assert_eq!(http.get(format!("{url}/api/sessions/nope")).send().await.unwrap().status(), StatusCode::NOT_FOUND);
    assert_eq!(chat(&http, &url, "s1", "  ").await.status(), StatusCode::BAD_REQUEST);
    assert_eq!(chat(&http, &url, "", "hello").await.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_survive_a_controller_restart() {
    let tmp = tempfile::tempdir().unwrap();
    let db = database(tmp.path());
    let runs = tmp.path().join("runs");
    let http = reqwest::Client::new();
    {
        let (_c, url) = start_controller(config(&runs)).await;
        start_worker("w1", mock_pipeline(&db), &url).await;
        wait_for_workers(&http, &url, 1).await;
        assert!(chat(&http, &url, "keep", "hello there").await.status().is_success());
    }
    let (c, _url) = start_controller(config(&runs)).await;
    assert_eq!(c.session("keep").unwrap().turns.len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn feedback_validates_turns_and_latest_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let db = database(tmp.path());
    let (_c, url) = start_controller(config(&tmp.path().join("runs"))).await;
    start_worker("w1", mock_pipeline(&db), &url).await;
    let http = reqwest::Client::new();
    wait_for_workers(&http, &url, 1).await;
    chat(&http, &url, "fb", "tell me about the garden").await;

    let post = |body: Value| {
        let http = http.clone();
        let url = url.clone();
        async move { http.post(format!("{url}/api/feedback")).json(&body).send().await.unwrap().status() }
    };
    assert_eq!(post(json!({"session_id": "fb", "turn_index": 1, "correctness": "correct", "helpfulness": 4})).await, StatusCode::OK);
    assert_eq!(post(json!({"session_id": "fb", "turn_index": 1, "correctness": "incorrect", "helpfulness": "unrated"})).await, StatusCode::OK);
    assert_eq!(post(json!({"session_id": "fb", "turn_index": 0, "correctness": "correct"})).await, StatusCode::BAD_REQUEST);
    assert_eq!(post(json!({"session_id": "fb", "turn_index": 9, "correctness": "correct"})).await, StatusCode::BAD_REQUEST);
    assert_eq!(post(json!({"session_id": "ghost", "turn_index": 1})).await, StatusCode::BAD_REQUEST);
    assert_eq!(post(json!({"session_id": "fb", "turn_index": 1, "helpfulness": 6})).await, StatusCode::BAD_REQUEST);
    assert_eq!(post(json!({"session_id": "fb", "turn_index": 1, "helpfulness": 0})).await, StatusCode::BAD_REQUEST);

    let log = lines(&tmp.path().join("runs").join(FEEDBACK_LOG));
    assert_eq!(log.len(), 2, "every accepted rating appends a line");
    let latest: Vec<FeedbackRecord> = http
        .get(format!("{url}/api/feedback?session_id=fb"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(latest.len(), 1);
    assert_eq!(serde_json::to_value(&latest[0].correctness).unwrap(), "incorrect");
    assert_eq!(serde_json::to_value(&latest[0].helpfulness).unwrap(), "unrated");
}

#[tokio::test(flavor = "multi_thread")]
async fn no_live_workers_is_503_with_retry_after() {
    let tmp = tempfile::tempdir().unwrap();
    let (_c, url) = start_controller(config(tmp.path())).await;
    let http = reqwest::Client::new();
    let resp = chat(&http, &url, "s", "anyone there").await;
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
    let retry: u64 = resp.headers()["retry-after"].to_str().unwrap().parse().unwrap();
    assert!(retry >= 1);
    let health: Health = http.get(format!("{url}/api/health")).send().await.unwrap().json().await.unwrap();
    assert!(!health.ready);
    assert!(tmp.path().join(CHAT_LOG).metadata().map(|m| m.len() == 0).unwrap_or(true));
}

#[tokio::test(flavor = "multi_thread")]
async fn slow_worker_times_out_and_leaves_session_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let db = database(tmp.path());
    let mut cfg = config(&tmp.path().join("runs"));
    cfg.request_timeout = Duration::from_millis(600);
    let (c, url) = start_controller(cfg).await;
    start_worker("slow", slow_pipeline(&db, Duration::from_millis(1500)), &url).await;
    let http = reqwest::Client::new();
    wait_for_workers(&http, &url, 1).await;

    let resp = chat(&http, &url, "t", "is anyone home").await;
    assert_eq!(resp.status(), StatusCode::GATEWAY_TIMEOUT);
    assert!(c.session("t").is_none());
    // a timeout is not a dead worker
    assert_eq!(workers(&http, &url).await.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn registration_conflicts_are_409() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.expected_identity = Some("expected".into());
    let (_c, url) = start_controller(cfg).await;
    let http = reqwest::Client::new();
    let register = |id: &str, base: &str, identity: &str| {
        let body = json!({"worker_id": id, "base_url": base, "pipeline_identity": identity, "max_concurrency": 2});
        let (http, url) = (http.clone(), url.clone());
        async move { http.post(format!("{url}/api/worker/register")).json(&body).send().await.unwrap().status() }
    };
    assert_eq!(register("a", "http://127.0.0.1:1", "expected").await, StatusCode::OK);
    assert_eq!(register("a", "http://127.0.0.1:1", "expected").await, StatusCode::OK, "re-registering is idempotent");
    assert_eq!(register("b", "http://127.0.0.1:1", "expected").await, StatusCode::CONFLICT);
    assert_eq!(register("c", "http://127.0.0.1:2", "other").await, StatusCode::CONFLICT);
    assert_eq!(workers(&http, &url).await.len(), 1);

    let beat = |id: &str| {
        let body = json!({"worker_id": id});
        let (http, url) = (http.clone(), url.clone());
        async move { http.post(format!("{url}/api/worker/heartbeat")).json(&body).send().await.unwrap().status() }
    };
    assert_eq!(beat("a").await, StatusCode::OK);
    assert_eq!(beat("zzz").await, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn silent_workers_expire() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.heartbeat_ttl = Duration::from_millis(300);
    let (_c, url) = start_controller(cfg).await;
    let http = reqwest::Client::new();
    let body = json!({"worker_id": "mute", "base_url": "http://127.0.0.1:1", "pipeline_identity": "p", "max_concurrency": 1});
    http.post(format!("{url}/api/worker/register")).json(&body).send().await.unwrap();
    assert_eq!(workers(&http, &url).await.len(), 1);
    tokio::time::sleep(Duration::from_millis(500)).await;
    assert!(workers(&http, &url).await.is_empty());
    assert_eq!(chat(&http, &url, "s", "hello").await.status(), StatusCode::SERVICE_UNAVAILABLE);
}

fn predictions(n: usize) -> Vec<PredictionRecord> {
    (0..n)
        .map(|i| PredictionRecord {
            question: format!("question {i}"),
            gold_answer: format!("answer {i}"),
            gold_passage_id: format!("p{i}"),
            retrieved_passage_ids: vec![format!("p{i}")],
            generated_answer: format!("generated {i}"),
            ..Default::default()
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn annotation_walk_over_76_records() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(tmp.path().join("eval")).unwrap();
    save_predictions(&predictions(76), &tmp.path().join("eval/predictions.jsonl")).unwrap();
    let (_c, url) = start_controller(config(tmp.path())).await;
    let http = reqwest::Client::new();
    let file = "eval/predictions.jsonl";

    let item = |cursor: usize| {
        let (http, url) = (http.clone(), url.clone());
        async move {
            http.get(format!("{url}/api/eval/items?file={file}&cursor={cursor}"))
                .send()
                .await
                .unwrap()
        }
    };
    let annotate = |index: usize, accuracy: &str| {
        let body = json!({"file": file, "record_index": index, "accuracy": accuracy, "notes": format!("n{index}")});
        let (http, url) = (http.clone(), url.clone());
        async move { http.post(format!("{url}/api/eval/annotate")).json(&body).send().await.unwrap() }
    };

    for i in 0..76 {
        let got: EvalItem = item(i).await.json().await.unwrap();
        assert_eq!(got.record_index, i);
        assert_eq!(got.record.question, format!("question {i}"));
        assert!(got.annotation.is_none());
        assert_eq!(got.progress.annotated, i);
        let reply: AnnotateResponse = annotate(i, if i % 4 == 0 { "incorrect" } else { "correct" }).await.json().await.unwrap();
        assert!(reply.ok);
        assert_eq!(reply.progress.annotated, i + 1);
        assert_eq!(reply.progress.complete, i == 75);
    }
    assert_eq!(item(76).await.status(), StatusCode::BAD_REQUEST);
    assert_eq!(annotate(76, "correct").await.status(), StatusCode::BAD_REQUEST);
    assert_eq!(annotate(3, "maybe").await.status(), StatusCode::UNPROCESSABLE_ENTITY);

    // re-annotating replaces the earlier verdict
    annotate(0, "correct").await;
    let first: EvalItem = item(0).await.json().await.unwrap();
    assert_eq!(serde_json::to_value(first.annotation.unwrap().accuracy).unwrap(), "correct");

    let summary: EvalSummaryResponse = http
        .get(format!("{url}/api/eval/summary?file={file}"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(summary.progress.complete);
    assert_eq!((summary.correct, summary.incorrect), (58, 18));
    assert!((summary.accuracy.unwrap() - 5800.0 / 76.0).abs() < 1e-9);

    let written = lines(&tmp.path().join("eval/predictions.jsonl.annotations.jsonl"));
    assert_eq!(written.len(), 77);

    let missing = http.get(format!("{url}/api/eval/items?file=eval/none.jsonl")).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    let escape = http.get(format!("{url}/api/eval/items?file=../x.jsonl")).send().await.unwrap();
    assert_eq!(escape.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn sequential_requests_alternate_between_two_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let db = database(tmp.path());
    let (_c, url) = start_controller(config(&tmp.path().join("runs"))).await;
    start_worker("w1", mock_pipeline(&db), &url).await;
    start_worker("w2", mock_pipeline(&db), &url).await;
    let http = reqwest::Client::new();
    wait_for_workers(&http, &url, 2).await;
    for i in 0..4 {
        assert!(chat(&http, &url, &format!("seq{i}"), "which bridge is oldest").await.status().is_success());
    }
    let served: Vec<u64> = workers(&http, &url).await.iter().map(|w| w.served).collect();
    assert_eq!(served, [2, 2]);
}

#[tokio::test(flavor = "multi_thread")]
async fn simultaneous_messages_to_one_session_are_ordered() {
    let tmp = tempfile::tempdir().unwrap();
    let db = database(tmp.path());
    let (c, url) = start_controller(config(&tmp.path().join("runs"))).await;
    start_worker("w1", slow_pipeline(&db, Duration::from_millis(100)), &url).await;
    start_worker("w2", slow_pipeline(&db, Duration::from_millis(100)), &url).await;
    let http = reqwest::Client::new();
    wait_for_workers(&http, &url, 2).await;
    let (a, b) = tokio::join!(chat(&http, &url, "same", "first question"), chat(&http, &url, "same", "second question"));
    let mut turns: Vec<usize> = Vec::new();
    for resp in [a, b] {
        turns.push(resp.json::<ChatResponse>().await.unwrap().turn_index);
    }
    turns.sort();
    assert_eq!(turns, [1, 3]);
    let session = c.session("same").unwrap();
    let roles: Vec<Role> = session.turns.iter().map(|t| t.role).collect();
    assert_eq!(roles, [Role::User, Role::Assistant, Role::User, Role::Assistant]);
}

#[tokio::test(flavor = "multi_thread")]
async fn reregistration_restores_rotation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.heartbeat_ttl = Duration::from_millis(300);
    let (_c, url) = start_controller(cfg).await;
    let http = reqwest::Client::new();
    let body = json!({"worker_id": "w", "base_url": "http://127.0.0.1:1", "pipeline_identity": "p", "max_concurrency": 1});
    let register = || http.post(format!("{url}/api/worker/register")).json(&body).send();
    register().await.unwrap();
    tokio::time::sleep(Duration::from_millis(450)).await;
    assert!(workers(&http, &url).await.is_empty());
    let beat = http.post(format!("{url}/api/worker/heartbeat")).json(&json!({"worker_id": "w"})).send().await.unwrap();
    assert_eq!(beat.status(), StatusCode::NOT_FOUND, "an evicted worker must register again");
    register().await.unwrap();
    assert_eq!(workers(&http, &url).await.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn static_bundle_is_served_at_root() {
    let tmp = tempfile::tempdir().unwrap();
    let ui = tmp.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>chat</html>").unwrap();
    let mut cfg = config(&tmp.path().join("runs"));
    cfg.static_dir = Some(ui);
    let (_c, url) = start_controller(cfg).await;
    let http = reqwest::Client::new();
    let page = http.get(format!("{url}/")).send().await.unwrap().text().await.unwrap();
    assert_eq!(page, "<html>chat</html>");
    let health = http.get(format!("{url}/api/health")).send().await.unwrap();
    assert!(health.status().is_success());
}

#[tokio::test(flavor = "multi_thread")]
async fn worker_generate_wraps_one_pipeline_call() {
    let tmp = tempfile::tempdir().unwrap();
    let db = database(tmp.path());
    let (_c, url) = start_controller(config(&tmp.path().join("runs"))).await;
    let worker_url = start_worker("solo", mock_pipeline(&db), &url).await;
    let http = reqwest::Client::new();
    let resp: Value = http
        .post(format!("{worker_url}/worker/generate"))
        .json(&json!({"question": "where is the castle", "session": DialogueSession::new("x")}))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(resp["worker_id"], "solo");
    assert_eq!(resp["sources"].as_array().unwrap().len(), 4);
    assert!(resp["answer"].as_str().is_some_and(|a| !a.is_empty()));
}
