//! Write question/answer pairs with hard negatives from a passage store,
//! using the offline mock writers (pass `remote` to use an LLM endpoint set
//! through RQA_LLM_ENDPOINT and RQA_LLM_KEY).
//!
//! `cargo run --release --example generate_qa_data -- [mock|remote]`

use localrqa::corpus::ingest;
use localrqa::datagen::Split;
use localrqa::synthetic::synthetic_documents;
use localrqa::tokenizer::WhitespaceTokenizer;
use localrqa::workflow::{generate_data, GenerateDataArgs};

fn main() -> localrqa::Result<()> {
    let client = std::env::args().nth(1).unwrap_or_else(|| "mock".into());
    // short chunks, so every document yields several passages and gold
    // passages have same-source siblings to use as hard negatives
    let store = ingest(&synthetic_documents(80, 1), 16, &WhitespaceTokenizer)?;
    let args = GenerateDataArgs {
        client,
        n_gold: 60,
        ..Default::default()
    };
    let pairs = generate_data(&store, &args)?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        println!("{split:?}: {}", pairs.iter().filter(|p| p.split == split).count());
    }
    for pair in pairs.iter().take(3) {
        println!();
        println!("Q: {}", pair.question);
        println!("A: {}", pair.answer);
        println!("gold {} with {} hard negatives", pair.gold_passage_id, pair.hard_negative_ids.len());
    }
    Ok(())
}
