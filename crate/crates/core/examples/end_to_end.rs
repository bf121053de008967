//! Full desk run on a synthetic corpus: ingest, generate QA data with the
//! offline mock writers, train a CTL retriever and an SFT generator, then
//! evaluate the assembled pipeline.
//!
//! `cargo run --release --example end_to_end -- [out_dir]`

use std::path::PathBuf;

use localrqa::corpus::DEFAULT_MAX_PASSAGE_TOKENS;
use localrqa::generator_train::{GeneratorAlgorithm, GeneratorTrainConfig};
use localrqa::nn::TransformerConfig;
use localrqa::pipeline::SimpleRqaConfig;
use localrqa::retriever_train::{RetrieverAlgorithm, RetrieverTrainConfig};
use localrqa::synthetic::synthetic_documents;
use localrqa::workflow::*;

fn main() -> localrqa::Result<()> {
    tracing_subscriber::fmt().with_env_filter("info").init();
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rqa-e2e"));
    std::fs::create_dir_all(&out)?;
    let docs = out.join("docs.jsonl");
    let lines: Vec<String> = synthetic_documents(200, 0)
        .iter()
        .map(|d| serde_json::to_string(d).unwrap())
        .collect();
    std::fs::write(&docs, lines.join("\n"))?;

    let passages = out.join("passages.jsonl");
    ingest_to(&docs, DEFAULT_MAX_PASSAGE_TOKENS, &passages)?;
    let qa = out.join("qa.jsonl");
    generate_data_to(&passages, &GenerateDataArgs { n_gold: 200, ..Default::default() }, &qa)?;

    let mut retriever = RetrieverTrainConfig::new(RetrieverAlgorithm::Ctl);
    retriever.max_steps = 400;
    let retriever_dir = out.join("retriever");
    train_retriever_to(&qa, &passages, &TrainRetrieverArgs { config: retriever, dim: 32, teacher: None }, &retriever_dir)?;

    let generator_dir = out.join("generator");
    let mut generator = GeneratorTrainConfig::new(GeneratorAlgorithm::Sft);
    generator.max_steps = 200;
    train_generator_to(
        &qa,
        &passages,
        &TrainGeneratorArgs { config: generator, model: TransformerConfig::default(), retriever: None },
        &generator_dir,
    )?;

    let db = out.join("db");
    build_database(&passages, &retriever_dir.to_string_lossy(), &db)?;
    let manifest = out.join("pipeline.json");
    write_simple_manifest(
        &manifest,
        &SimpleRqaConfig {
            database_path: "db".into(),
            embedder: "retriever".into(),
            generator: "generator".into(),
            k: 4,
            budget_tokens: 1024,
            max_new_tokens: 16,
        },
    )?;
    let summary = eval_to(&manifest, &qa, &passages, &EvalArgs { k: 4, judge: "mock".into() }, &out.join("predictions.jsonl"))?;
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}
