//! Supervised fine-tuning of a small decoder on (gold passage, question,
//! answer) prompts, then greedy answering from the same prompts.
//!
//! `cargo run --release --example train_generator_sft`

use localrqa::corpus::{ingest, DEFAULT_MAX_PASSAGE_TOKENS};
use localrqa::datagen::{QAPair, Split};
use localrqa::evaluation::rouge_l;
use localrqa::generation::PromptAssembly;
use localrqa::generator_train::{sft_examples, train_generator, GeneratorAlgorithm, GeneratorTrainConfig, LocalGenerator};
use localrqa::llm::SamplingParams;
use localrqa::nn::{TinyDecoder, TransformerConfig};
use localrqa::session::DialogueSession;
use localrqa::synthetic::synthetic_documents;
use localrqa::tokenizer::WhitespaceTokenizer;

fn main() -> localrqa::Result<()> {
    let store = ingest(&synthetic_documents(10, 0), DEFAULT_MAX_PASSAGE_TOKENS, &WhitespaceTokenizer)?;
    // the founding date sits at a fixed offset in every synthetic passage
    let pairs: Vec<QAPair> = store
        .iter()
        .map(|p| {
            let words: Vec<&str> = p.content.split_whitespace().collect();
            QAPair {
                question: format!("when was {} founded?", words[0]),
                answer: words[12..16].join(" "),
                gold_passage_id: p.passage_id.clone(),
                hard_negative_ids: Vec::new(),
                split: Split::Train,
            }
        })
        .collect();

    let assembly = PromptAssembly::default();
    let texts: Vec<String> = sft_examples(&pairs, &store, &assembly)?
        .into_iter()
        .flat_map(|(prompt, answer)| [prompt, answer])
        .collect();
    let decoder = TinyDecoder::for_texts("sft-demo", texts.iter().map(String::as_str), TransformerConfig::default())?;
    let mut model = LocalGenerator::Decoder(decoder);
    let mut config = GeneratorTrainConfig::new(GeneratorAlgorithm::Sft);
    config.max_steps = 300;
    let log = train_generator(&mut model, &pairs, &store, &config, None, &assembly)?;
    println!("loss {:.3} -> {:.3}", log.losses[0], log.last().unwrap_or(f64::NAN));

    let LocalGenerator::Decoder(decoder) = model else { unreachable!("trained a decoder") };
    for pair in &pairs {
        let gold = store.get(&pair.gold_passage_id).expect("gold passage is in the store");
        let prompt = assembly.assemble(&pair.question, &[gold], &DialogueSession::default())?;
        let answer = decoder.generate_text(&prompt, &SamplingParams::greedy(16))?;
        println!("{:<40} -> {answer:<24} rouge-l {:.2}", pair.question, rouge_l(&answer, &pair.answer));
    }
    Ok(())
}
