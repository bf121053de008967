use std::collections::HashMap;

use super::{top_k, Hit, RetrievalResult, Retriever};
use crate::corpus::PassageStore;
use crate::error::{Result, RqaError};

pub const BM25_K1: f64 = 1.5;
pub const BM25_B: f64 = 0.75;

fn terms(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Okapi BM25 over whitespace-split, lowercased tokens.
///
/// Uses the non-negative idf `ln((N - df + 0.5) / (df + 0.5) + 1)`, so a
/// term present in every passage still contributes a small positive score.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    ids: Vec<String>,
    term_freqs: Vec<HashMap<String, usize>>,
    lengths: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn build(store: &PassageStore) -> Result<Self> {
        if store.is_empty() {
            return Err(RqaError::EmptyCorpus);
        }
        let mut index = Bm25Index {
            ids: Vec::with_capacity(store.len()),
            term_freqs: Vec::with_capacity(store.len()),
            lengths: Vec::with_capacity(store.len()),
            doc_freq: HashMap::new(),
            avg_len: 0.0,
        };
        for p in store.iter() {
            let toks = terms(&p.content);
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks.iter() {
                *tf.entry(t.clone()).or_insert(0) += 1;
            }
            for t in tf.keys() {
                *index.doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
            index.ids.push(p.passage_id.clone());
            index.lengths.push(toks.len());
            index.term_freqs.push(tf);
        }
        index.avg_len = index.lengths.iter().sum::<usize>() as f64 / index.ids.len() as f64;
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 score of every passage, in store order.
    pub fn scores(&self, query: &str) -> Result<Vec<f64>> {
        let q = terms(query);
        if q.is_empty() {
            return Err(RqaError::EmptyQuery);
        }
        let idfs: Vec<f64> = q.iter().map(|t| self.idf(t)).collect();
        let avg = if self.avg_len > 0.0 { self.avg_len } else { 1.0 };
        Ok(self
            .term_freqs
            .iter()
            .zip(&self.lengths)
            .map(|(tf, &len)| {
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * len as f64 / avg);
                q.iter()
                    .zip(&idfs)
                    .map(|(t, idf)| match tf.get(t) {
                        Some(&f) => {
                            let f = f as f64;
                            idf * f * (BM25_K1 + 1.0) / (f + norm)
                        }
                        None => 0.0,
                    })
                    .sum()
            })
            .collect())
    }

    pub fn search(&self, query: &str, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(RqaError::Precondition("k must be at least 1".into()));
        }
        let scores = self.scores(query)?;
        let hits = top_k(scores.iter().copied().zip(self.ids.iter().map(String::as_str)), k)
            .into_iter()
            .map(|(i, score)| Hit {
                passage_id: self.ids[i].clone(),
                score,
            })
            .collect();
        Ok(RetrievalResult {
            query: query.to_string(),
            k,
            hits,
        })
    }
}

impl Retriever for Bm25Index {
    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult> {
        self.search(query, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;
    use crate::tokenizer::WhitespaceTokenizer;

    fn store(texts: &[&str]) -> PassageStore {
        PassageStore::from_passages(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage::new(*t, format!("doc{i}"), 0, &WhitespaceTokenizer))
                .collect(),
        )
    }

    #[test]
    fn single_match_wins() {
        let s = store(&["cat sat", "dog ran"]);
        let idx = Bm25Index::build(&s).unwrap();
        let r = idx.search("cat", 1).unwrap();
        assert_eq!(s.get(&r.hits[0].passage_id).unwrap().content, "cat sat");
    }

    #[test]
    fn no_overlap_scores_zero_and_sorts_by_id() {
        let s = store(&["a b", "c d", "e f"]);
        let idx = Bm25Index::build(&s).unwrap();
        let r = idx.search("zzz", 3).unwrap();
        assert!(r.hits.iter().all(|h| h.score == 0.0));
        let ids = r.passage_ids();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn matches_hand_table() {
        // lengths 3, 2, 4 -> avgdl 3
        let s = store(&["apple banana apple", "banana cherry", "cherry cherry date apple"]);
        let idx = Bm25Index::build(&s).unwrap();
        let scores = idx.scores("apple cherry").unwrap();
        let idf = |df: f64| ((3.0 - df + 0.5) / (df + 0.5) + 1.0f64).ln();
        let term = |f: f64, len: f64, df: f64| {
            idf(df) * f * 2.5 / (f + 1.5 * (0.25 + 0.75 * len / 3.0))
        };
        let expected = [
            term(2.0, 3.0, 2.0),
            term(1.0, 2.0, 2.0),
            term(1.0, 4.0, 2.0) + term(2.0, 4.0, 2.0),
        ];
        let by_content: Vec<f64> = ["apple banana apple", "banana cherry", "cherry cherry date apple"]
            .iter()
            .map(|c| {
                let pos = s.iter().position(|p| p.content == *c).unwrap();
                scores[pos]
            })
            .collect();
        for (a, b) in by_content.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let top = idx.search("apple cherry", 3).unwrap();
        assert_eq!(s.get(&top.hits[0].passage_id).unwrap().content, "cherry cherry date apple");
    }

    #[test]
    fn errors() {
        assert!(matches!(Bm25Index::build(&PassageStore::default()), Err(RqaError::EmptyCorpus)));
        let idx = Bm25Index::build(&store(&["x"])).unwrap();
        assert!(matches!(idx.search("   ", 1), Err(RqaError::EmptyQuery)));
        assert!(idx.search("x", 0).is_err());
        assert_eq!(idx.search("x", 5).unwrap().hits.len(), 1);
    }
}
