//! Automatic evaluation of a pipeline on a held-out split: retrieval
//! metrics, ROUGE-L and BLEU against gold answers, an LLM-judge accuracy
//! (the offline mock judge here) and per-stage latency.
//!
//! `cargo run --release --example evaluate_pipeline`

use localrqa::corpus::{ingest, DEFAULT_MAX_PASSAGE_TOKENS};
use localrqa::datagen::Split;
use localrqa::evaluation::{evaluate_pipeline, summary_path, EvalOptions};
use localrqa::llm::{MockLlmClient, PromptTemplate};
use localrqa::pipeline::{SimpleRQA, PASSAGES_FILE};
use localrqa::synthetic::synthetic_documents;
use localrqa::tokenizer::WhitespaceTokenizer;
use localrqa::workflow::{generate_data, GenerateDataArgs};

fn main() -> localrqa::Result<()> {
    let dir = std::env::temp_dir().join("rqa-evaluate");
    let db = dir.join("db");
    std::fs::create_dir_all(&db)?;
    let store = ingest(&synthetic_documents(100, 4), DEFAULT_MAX_PASSAGE_TOKENS, &WhitespaceTokenizer)?;
    store.save(&db.join(PASSAGES_FILE))?;
    let pairs = generate_data(&store, &GenerateDataArgs { n_gold: 100, ..Default::default() })?;
    let test: Vec<_> = pairs.into_iter().filter(|p| p.split == Split::Test).collect();

    let pipeline = SimpleRQA::from_scratch(&db, "bm25", "mock", 4)?;
    let judge = MockLlmClient::judge();
    let options = EvalOptions {
        k: 4,
        judge: Some((&judge, PromptTemplate::judge())),
    };
    let out = dir.join("predictions.jsonl");
    let summary = evaluate_pipeline(&pipeline, &test, &store, &options, &out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("predictions: {}\nsummary: {}", out.display(), summary_path(&out).display());
    Ok(())
}
