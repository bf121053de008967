//! Chunk documents into passages, then search them with BM25.
//!
//! `cargo run --release --example ingest_and_search -- [docs-dir-or-jsonl] [query]`

use std::path::PathBuf;

use localrqa::corpus::{ingest, read_documents, DEFAULT_MAX_PASSAGE_TOKENS};
use localrqa::retrieval::{Bm25Index, Retriever};
use localrqa::synthetic::synthetic_documents;
use localrqa::tokenizer::WhitespaceTokenizer;

fn main() -> localrqa::Result<()> {
    let mut args = std::env::args().skip(1);
    let docs = match args.next() {
        Some(path) => read_documents(&PathBuf::from(path))?,
        None => synthetic_documents(50, 0),
    };
    let store = ingest(&docs, DEFAULT_MAX_PASSAGE_TOKENS, &WhitespaceTokenizer)?;
    println!("{} documents -> {} passages", docs.len(), store.len());

    let query = args.next().unwrap_or_else(|| {
        // ask about the first entity of the first passage
        let first = store.passages()[0].content.split_whitespace().next().unwrap_or("river");
        format!("what is {first} known for")
    });
    let index = Bm25Index::build(&store)?;
    let result = index.retrieve(&query, 4)?;
    println!("query: {query}");
    for hit in &result.hits {
        let passage = store.get(&hit.passage_id).expect("hit comes from the store");
        let preview: String = passage.content.chars().take(80).collect();
        println!("{:>7.3}  {}  {preview}", hit.score, passage.source);
    }
    Ok(())
}
