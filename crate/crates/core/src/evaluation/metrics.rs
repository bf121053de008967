//! Retrieval and generation metrics.
//!
//! Text metrics operate on whitespace tokens. ROUGE-L is the LCS-based F1
//! (not the recall-weighted F-beta), and BLEU is sentence-level with add-one
//! smoothing for every n ≥ 2.

use std::collections::HashMap;

use super::PredictionRecord;
use crate::error::{Result, RqaError};

fn check_k(records: &[PredictionRecord], k: usize) -> Result<()> {
    if records.is_empty() {
        return Err(RqaError::EmptyEvalSet);
    }
    if k == 0 {
        return Err(RqaError::Precondition("k must be at least 1".into()));
    }
    if let Some(r) = records.iter().find(|r| r.retrieved_passage_ids.len() < k) {
        return Err(RqaError::Precondition(format!(
            "k={k} exceeds the {} passages retrieved for {:?}",
            r.retrieved_passage_ids.len(),
            r.question
        )));
    }
    Ok(())
}

/// 1-based rank of the gold passage among the first `k` retrieved ids.
fn gold_rank(record: &PredictionRecord, k: usize) -> Option<usize> {
    record
        .retrieved_passage_ids
        .iter()
        .take(k)
        .position(|id| *id == record.gold_passage_id)
        .map(|i| i + 1)
}

/// Fraction of records whose gold passage is among the first `k` retrieved.
pub fn recall_at_k(records: &[PredictionRecord], k: usize) -> Result<f64> {
    check_k(records, k)?;
    let hits = records.iter().filter(|r| gold_rank(r, k).is_some()).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Binary-relevance nDCG@k with a single relevant passage, so IDCG = 1.
pub fn ndcg_at_k(records: &[PredictionRecord], k: usize) -> Result<f64> {
    check_k(records, k)?;
    let total: f64 = records
        .iter()
        .map(|r| gold_rank(r, k).map_or(0.0, |rank| 1.0 / ((rank + 1) as f64).log2()))
        .sum();
    Ok(total / records.len() as f64)
}

/// Length of the longest common subsequence, using two rolling rows.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 between whitespace-tokenized strings; 0 when either is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &refs) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let recall = lcs / refs.len() as f64;
    let precision = lcs / cand.len() as f64;
    2.0 * recall * precision / (recall + precision)
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions for
/// n = 1..=max_n (add-one smoothed for n ≥ 2) times the brevity penalty
/// `exp(min(0, 1 − |ref|/|cand|))`.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() || refs.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let c = ngram_counts(&cand, n);
        let r = ngram_counts(&refs, n);
        let matched: usize = c
            .iter()
            .map(|(g, &cnt)| cnt.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let total = cand.len().saturating_sub(n - 1);
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = (1.0 - refs.len() as f64 / cand.len() as f64).min(0.0).exp();
    bp * (log_sum / max_n as f64).exp()
}
