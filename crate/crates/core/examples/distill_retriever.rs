//! Retriever distillation from a reader: DCA matches the encoder-decoder's
//! cross-attention mass per passage, RPG matches the decoder's answer
//! likelihood per passage. Teachers here are untrained, so the point is the
//! mechanics: the KL between retriever and teacher falls towards zero.
//!
//! `cargo run --release --example distill_retriever`

use std::sync::Arc;

use localrqa::generation::PromptAssembly;
use localrqa::nn::{LinearEmbedder, LinearEmbedderConfig, TinyDecoder, TinyEncoderDecoder, TransformerConfig};
use localrqa::retriever_train::{train_retriever, AuxModel, DecoderTeacher, RetrieverAlgorithm, RetrieverTrainConfig};
use localrqa::synthetic::{topic_corpus, TopicCorpusConfig};

fn main() -> localrqa::Result<()> {
    let corpus = topic_corpus(&TopicCorpusConfig {
        n_topics: 8,
        train_per_topic: 2,
        ..Default::default()
    });
    let texts: Vec<&str> = corpus
        .store
        .iter()
        .map(|p| p.content.as_str())
        .chain(corpus.train.iter().flat_map(|p| [p.question.as_str(), p.answer.as_str()]))
        .collect();

    for algorithm in [RetrieverAlgorithm::Dca, RetrieverAlgorithm::Rpg] {
        let aux = match algorithm {
            RetrieverAlgorithm::Dca => AuxModel::CrossAttention(Arc::new(TinyEncoderDecoder::for_texts(
                "reader",
                texts.iter().copied(),
                TransformerConfig::default(),
            )?)),
            _ => {
                let decoder = TinyDecoder::for_texts("reader", texts.iter().copied(), TransformerConfig::default())?;
                AuxModel::Likelihood(Arc::new(DecoderTeacher::new(Arc::new(decoder), PromptAssembly::default())?))
            }
        };
        let mut embedder = LinearEmbedder::for_texts("student", texts.iter().copied(), LinearEmbedderConfig::default());
        let mut config = RetrieverTrainConfig::new(algorithm);
        config.k_train = 4;
        config.batch_size = 4;
        config.max_steps = 300;
        config.learning_rate = 0.05;
        let log = train_retriever(&mut embedder, &corpus.train, &corpus.store, &config, &aux)?;
        println!(
            "{algorithm:?}: KL {:.2e} -> {:.2e}",
            log.losses[0],
            log.last().unwrap_or(f64::NAN).max(0.0)
        );
    }
    Ok(())
}
