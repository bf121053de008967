//! Offline evaluation of a pipeline against a held-out QA split.

pub mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PassageStore;
use crate::datagen::QAPair;
use crate::error::{Result, RqaError};
use crate::llm::{LlmClient, PromptTemplate, SamplingParams};
use crate::pipeline::{ComponentKind, RQAPipeline};
use crate::session::DialogueSession;

pub use metrics::{bleu, ndcg_at_k, recall_at_k, rouge_l};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// Reads the last line of the form `VERDICT: CORRECT` or `VERDICT: INCORRECT`.
pub fn parse_verdict(text: &str) -> Option<Verdict> {
    text.lines().rev().find_map(|line| {
        let line = line.trim().trim_matches('*').trim();
        let rest = line.strip_prefix("VERDICT:")?.trim();
        match rest {
            "CORRECT" => Some(Verdict::Correct),
            "INCORRECT" => Some(Verdict::Incorrect),
            _ => None,
        }
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub correct: usize,
    pub incorrect: usize,
    /// Records whose judge output could not be parsed even after a retry.
    pub invalid: usize,
    /// Percentage of valid verdicts that are correct; `None` when no verdict is valid.
    pub accuracy: Option<f64>,
}

/// Asks `judge` about every record without an error and stores the verdicts
/// in the records. A reply without a verdict line is retried once with a
/// different seed before counting as invalid.
pub fn judge_accuracy(
    records: &mut [PredictionRecord],
    store: &PassageStore,
    judge: &dyn LlmClient,
    template: &PromptTemplate,
) -> Result<JudgeReport> {
    if records.is_empty() {
        return Err(RqaError::EmptyEvalSet);
    }
    let verdicts: Vec<Option<Option<Verdict>>> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.error.is_some() {
                return None;
            }
            let passage = store.get(&r.gold_passage_id).map_or("", |p| p.content.as_str());
            let prompt = template.render(&[
                ("question", &r.question),
                ("passage", passage),
                ("gold_answer", &r.gold_answer),
                ("generated_answer", &r.generated_answer),
            ]);
            let verdict = (0..2u64).find_map(|attempt| {
                let sampling = SamplingParams::greedy(256).with_seed(2 * i as u64 + attempt);
                match judge.generate(&prompt, &sampling) {
                    Ok(reply) => parse_verdict(&reply),
                    Err(e) => {
                        tracing::warn!(record = i, error = %e, "judge call failed");
                        None
                    }
                }
            });
            if verdict.is_none() {
                tracing::warn!(record = i, "{}", RqaError::JudgeParse("no verdict line after retry".into()));
            }
            Some(verdict)
        })
        .collect();
    let mut report = JudgeReport::default();
    for (r, v) in records.iter_mut().zip(verdicts) {
        match v {
            None => {}
            Some(None) => {
                report.invalid += 1;
                r.judge_verdict = None;
            }
            Some(Some(verdict)) => {
                match verdict {
                    Verdict::Correct => report.correct += 1,
                    Verdict::Incorrect => report.incorrect += 1,
                }
                r.judge_verdict = Some(verdict);
            }
        }
    }
    let valid = report.correct + report.incorrect;
    report.accuracy = (valid > 0).then(|| report.correct as f64 / valid as f64 * 100.0);
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl RuntimeStats {
    /// Mean and nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return RuntimeStats::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pct = |p: f64| sorted[((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        RuntimeStats {
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: pct(0.50),
            p95_ms: pct(0.95),
        }
    }
}

/// Written next to the predictions file as `<predictions>.summary.json`.
///
/// `metrics` holds `recall@1`, `recall@<k>`, `ndcg@<k>`, `rouge_l`, `bleu` and
/// `judge_acc`; each is `null` when it could not be computed (no successful
/// items, or no judge).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_items: usize,
    pub failures: usize,
    pub k: usize,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeReport>,
    pub retrieval_runtime: RuntimeStats,
    pub generation_runtime: RuntimeStats,
}

pub struct EvalOptions<'a> {
    pub k: usize,
    pub judge: Option<(&'a dyn LlmClient, PromptTemplate)>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        EvalOptions { k: 4, judge: None }
    }
}

pub fn summary_path(predictions: &Path) -> std::path::PathBuf {
    let mut name = predictions.as_os_str().to_owned();
    name.push(".summary.json");
    name.into()
}

/// Runs `pipeline` once per test pair, each with a fresh session, and writes
/// the predictions JSONL (input order) to `out` plus the summary next to it.
/// A failing item is recorded with its error and excluded from the metrics.
pub fn evaluate_pipeline(
    pipeline: &RQAPipeline,
    test_pairs: &[QAPair],
    store: &PassageStore,
    options: &EvalOptions,
    out: &Path,
) -> Result<EvalSummary> {
    if test_pairs.is_empty() {
        return Err(RqaError::EmptyEvalSet);
    }
    let mut records: Vec<PredictionRecord> = test_pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut record = PredictionRecord {
                question: pair.question.clone(),
                gold_answer: pair.answer.clone(),
                gold_passage_id: pair.gold_passage_id.clone(),
                ..Default::default()
            };
            let session = DialogueSession::new(format!("eval-{i}"));
            match pipeline.qa_timed(vec![pair.question.clone()], vec![session]) {
                Ok((mut output, timings)) => {
                    for t in timings {
                        let ms = t.elapsed.as_secs_f64() * 1e3;
                        match t.kind {
                            ComponentKind::Retriever => record.retrieval_time_ms += ms,
                            _ => record.generation_time_ms += ms,
                        }
                    }
                    record.retrieved_passage_ids = output
                        .batch_source_documents
                        .remove(0)
                        .into_iter()
                        .map(|p| p.passage_id)
                        .collect();
                    record.generated_answer = output.batch_answers.remove(0);
                }
                Err(e) => {
                    tracing::warn!(item = i, error = %e, "pipeline failed");
                    record.error = Some(e.to_string());
                }
            }
            record
        })
        .collect();

    let judge = match &options.judge {
        Some((client, template)) => Some(judge_accuracy(&mut records, store, *client, template)?),
        None => None,
    };

    let ok: Vec<PredictionRecord> = records.iter().filter(|r| r.error.is_none()).cloned().collect();
    let k = options.k;
    let mut metrics = BTreeMap::new();
    let retrieval = |kk: usize, f: fn(&[PredictionRecord], usize) -> Result<f64>| -> Result<Option<f64>> {
        if ok.is_empty() {
            Ok(None)
        } else {
            f(&ok, kk).map(Some)
        }
    };
    metrics.insert("recall@1".to_string(), retrieval(1, recall_at_k)?);
    metrics.insert(format!("recall@{k}"), retrieval(k, recall_at_k)?);
    metrics.insert(format!("ndcg@{k}"), retrieval(k, ndcg_at_k)?);
    let mean = |f: fn(&str, &str) -> f64| -> Option<f64> {
        (!ok.is_empty()).then(|| ok.iter().map(|r| f(&r.generated_answer, &r.gold_answer)).sum::<f64>() / ok.len() as f64)
    };
    metrics.insert("rouge_l".to_string(), mean(rouge_l));
    metrics.insert("bleu".to_string(), mean(|c, r| bleu(c, r, 4)));
    metrics.insert("judge_acc".to_string(), judge.as_ref().and_then(|j| j.accuracy));

    let summary = EvalSummary {
        n_items: records.len(),
        failures: records.len() - ok.len(),
        k,
        metrics,
        judge,
        retrieval_runtime: RuntimeStats::from_samples(&ok.iter().map(|r| r.retrieval_time_ms).collect::<Vec<_>>()),
        generation_runtime: RuntimeStats::from_samples(&ok.iter().map(|r| r.generation_time_ms).collect::<Vec<_>>()),
    };

    save_predictions(&records, out)?;
    std::fs::write(summary_path(out), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RqaError::Load {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// One evaluated question, as written to the predictions file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub question: String,
    pub gold_answer: String,
    pub gold_passage_id: String,
    pub retrieved_passage_ids: Vec<String>,
    pub generated_answer: String,
    pub retrieval_time_ms: f64,
    pub generation_time_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}
