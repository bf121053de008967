//! Contrastive retriever training on a corpus where queries and passages
//! share no words, so lexical matching cannot help and only learning can.
//!
//! `cargo run --release --example train_retriever_ctl`

use localrqa::evaluation::{recall_at_k, PredictionRecord};
use localrqa::nn::{LinearEmbedder, LinearEmbedderConfig};
use localrqa::retrieval::{dense_search, VectorIndex};
use localrqa::retriever_train::{train_retriever, AuxModel, RetrieverAlgorithm, RetrieverTrainConfig};
use localrqa::synthetic::{topic_corpus, TopicCorpus, TopicCorpusConfig};

fn recall_at_1(embedder: &LinearEmbedder, corpus: &TopicCorpus) -> localrqa::Result<f64> {
    let index = VectorIndex::build(&corpus.store, embedder)?;
    let records = corpus
        .test
        .iter()
        .map(|p| {
            Ok(PredictionRecord {
                gold_passage_id: p.gold_passage_id.clone(),
                retrieved_passage_ids: dense_search(&index, embedder, &p.question, 1)?.passage_ids(),
                ..Default::default()
            })
        })
        .collect::<localrqa::Result<Vec<_>>>()?;
    recall_at_k(&records, 1)
}

fn main() -> localrqa::Result<()> {
    let corpus = topic_corpus(&TopicCorpusConfig::default());
    let texts = corpus
        .store
        .iter()
        .map(|p| p.content.as_str())
        .chain(corpus.train.iter().map(|p| p.question.as_str()));
    let mut embedder = LinearEmbedder::for_texts("ctl-demo", texts, LinearEmbedderConfig::default());
    println!("recall@1 before: {:.3}", recall_at_1(&embedder, &corpus)?);

    let mut config = RetrieverTrainConfig::new(RetrieverAlgorithm::Ctl);
    config.max_steps = 1500;
    let log = train_retriever(&mut embedder, &corpus.train, &corpus.store, &config, &AuxModel::None)?;
    println!(
        "loss {:.3} -> {:.3} over {} steps",
        log.losses[0],
        log.last().unwrap_or(f64::NAN),
        log.losses.len()
    );
    println!("recall@1 after:  {:.3}", recall_at_1(&embedder, &corpus)?);
    Ok(())
}
