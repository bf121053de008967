//! Fusion-in-decoder: an encoder-decoder that reads each retrieved passage
//! separately and fuses them in the decoder. Trained against a frozen BM25
//! retriever and served through the same pipeline interface as any reader.
//!
//! `cargo run --release --example fid_reader`

use std::sync::Arc;

use localrqa::corpus::{ingest, DEFAULT_MAX_PASSAGE_TOKENS};
use localrqa::datagen::Split;
use localrqa::evaluation::rouge_l;
use localrqa::generation::PromptAssembly;
use localrqa::generator_train::{train_generator, GeneratorAlgorithm, GeneratorTrainConfig, LocalGenerator};
use localrqa::llm::SamplingParams;
use localrqa::nn::{TinyEncoderDecoder, TransformerConfig};
use localrqa::pipeline::SimpleRQA;
use localrqa::retrieval::Bm25Index;
use localrqa::session::DialogueSession;
use localrqa::synthetic::synthetic_documents;
use localrqa::tokenizer::WhitespaceTokenizer;
use localrqa::workflow::{generate_data, GenerateDataArgs};

fn main() -> localrqa::Result<()> {
    let store = Arc::new(ingest(&synthetic_documents(30, 3), DEFAULT_MAX_PASSAGE_TOKENS, &WhitespaceTokenizer)?);
    let pairs = generate_data(&store, &GenerateDataArgs { n_gold: 30, ..Default::default() })?;
    let train: Vec<_> = pairs.iter().filter(|p| p.split == Split::Train).cloned().collect();

    let texts = store
        .iter()
        .map(|p| p.content.as_str())
        .chain(train.iter().flat_map(|p| [p.question.as_str(), p.answer.as_str()]))
        .chain(["question: context:"]);
    let mut model = LocalGenerator::EncoderDecoder(TinyEncoderDecoder::for_texts("fid-demo", texts, TransformerConfig::default())?);
    let bm25 = Arc::new(Bm25Index::build(&store)?);
    let mut config = GeneratorTrainConfig::new(GeneratorAlgorithm::Fid);
    config.max_steps = 200;
    let assembly = PromptAssembly::default();
    let log = train_generator(&mut model, &train, &store, &config, Some(bm25.as_ref()), &assembly)?;
    println!("loss {:.3} -> {:.3}", log.losses[0], log.last().unwrap_or(f64::NAN));

    let LocalGenerator::EncoderDecoder(reader) = model else { unreachable!("trained an encoder-decoder") };
    let pipeline = SimpleRQA::from_parts(bm25, store.clone(), "bm25", 4, Arc::new(reader), assembly, SamplingParams::greedy(16));
    for pair in train.iter().take(5) {
        let out = pipeline.qa(vec![pair.question.clone()], vec![DialogueSession::default()])?;
        let answer = &out.batch_answers[0];
        println!("{}\n  -> {answer} (rouge-l {:.2})", pair.question, rouge_l(answer, &pair.answer));
    }
    Ok(())
}
