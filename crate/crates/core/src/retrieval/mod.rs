//! Lexical and dense retrieval over a [`PassageStore`](crate::corpus::PassageStore).

mod bm25;
mod dense;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use bm25::{Bm25Index, BM25_B, BM25_K1};
pub use dense::{dense_search, DenseRetriever, VectorIndex, INDEX_MAGIC};

/// Maps text to fixed-size vectors. Queries and passages may be encoded
/// differently.
pub trait Embedder: Send + Sync {
    /// Identifies the exact weights; an index remembers the identity it was
    /// built with.
    fn identity(&self) -> String;

    fn dimension(&self) -> usize;

    fn embed_query(&self, text: &str) -> Result<Vec<f64>>;

    fn embed_passage(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub passage_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub k: usize,
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn passage_ids(&self) -> Vec<String> {
        self.hits.iter().map(|h| h.passage_id.clone()).collect()
    }
}

/// Anything that turns a query into ranked passages.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult>;
}

struct Candidate<'a> {
    score: f64,
    id: &'a str,
    index: usize,
}

impl Candidate<'_> {
    /// Higher score first, then ascending passage id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate<'_> {
    // Max-heap top is the worst-ranked candidate kept so far.
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Indices of the `k` best `(score, id)` pairs, best first, with ties broken
/// by ascending id.
pub(crate) fn top_k<'a>(scored: impl Iterator<Item = (f64, &'a str)>, k: usize) -> Vec<(usize, f64)> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Candidate<'a>> = BinaryHeap::with_capacity(k + 1);
    for (index, (score, id)) in scored.enumerate() {
        let c = Candidate { score, id, index };
        if heap.len() < k {
            heap.push(c);
        } else if c.rank_cmp(heap.peek().expect("non-empty")) == Ordering::Less {
            heap.pop();
            heap.push(c);
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|c| (c.index, c.score))
        .collect()
}
