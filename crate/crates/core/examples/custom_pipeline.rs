//! Composing a pipeline from components: a custom query rewriter in front of
//! retrieval and generation, and the "I don't know" safety filter at the end.
//! Also round-trips the built-in parts through a JSON manifest.
//!
//! `cargo run --release --example custom_pipeline`

use std::sync::Arc;

use localrqa::corpus::{ingest, DEFAULT_MAX_PASSAGE_TOKENS};
use localrqa::pipeline::{
    questions, Component, DontKnowSafetyFilter, PipelineManifest, RQAPipeline, SimpleRQA, SimpleRqaConfig, State, Value,
    BATCH_QUESTIONS, PASSAGES_FILE,
};
use localrqa::session::DialogueSession;
use localrqa::synthetic::synthetic_documents;
use localrqa::tokenizer::WhitespaceTokenizer;

/// Lowercases questions and strips punctuation before retrieval.
struct Normalize;

impl Component for Normalize {
    fn name(&self) -> String {
        "normalize".into()
    }

    fn run_input_keys(&self) -> Vec<String> {
        vec![BATCH_QUESTIONS.into()]
    }

    fn run(&self, inputs: &State) -> localrqa::Result<State> {
        let cleaned = questions(inputs)?
            .iter()
            .map(|q| q.to_lowercase().chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect())
            .collect();
        Ok(State::from([(BATCH_QUESTIONS.to_string(), Value::Questions(cleaned))]))
    }
}

fn main() -> localrqa::Result<()> {
    let dir = std::env::temp_dir().join("rqa-custom-pipeline");
    let db = dir.join("db");
    std::fs::create_dir_all(&db)?;
    let store = ingest(&synthetic_documents(40, 2), DEFAULT_MAX_PASSAGE_TOKENS, &WhitespaceTokenizer)?;
    store.save(&db.join(PASSAGES_FILE))?;
    let entity = store.passages()[0].content.split_whitespace().next().unwrap_or("it").to_string();
    let question = format!("What is {entity} KNOWN for?");

    let simple = SimpleRQA::from_scratch(&db, "bm25", "mock", 4)?;
    let mut components: Vec<Arc<dyn Component>> = vec![Arc::new(Normalize)];
    components.extend(simple.components);
    let pipeline = RQAPipeline::new(components);
    println!("identity: {}", pipeline.identity());

    let mut session = DialogueSession::new("demo");
    let out = pipeline.qa(vec![question.clone()], vec![session.clone()])?;
    println!("answer: {}", out.batch_answers[0]);
    for p in &out.batch_source_documents[0] {
        println!("  source {} ({})", p.source, p.passage_id);
    }
    session = out.batch_dialogue_session[0].clone();
    println!("session now has {} turns", session.turns.len());

    let mut guarded = pipeline;
    guarded.components.push(Arc::new(DontKnowSafetyFilter));
    let out = guarded.qa(vec![question], vec![DialogueSession::default()])?;
    println!("with the safety filter: {}", out.batch_answers[0]);

    let manifest = PipelineManifest::simple(&SimpleRqaConfig {
        database_path: "db".into(),
        embedder: "bm25".into(),
        generator: "mock".into(),
        k: 4,
        budget_tokens: 1024,
        max_new_tokens: 64,
    })?
    .with("dont_know_filter");
    let path = dir.join("pipeline.json");
    manifest.save(&path)?;
    let rebuilt = PipelineManifest::load(&path)?.build(&dir)?;
    println!("manifest {} -> {}", path.display(), rebuilt.identity());
    Ok(())
}
