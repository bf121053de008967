//! Building ⟨question, answer, passage⟩ data: gold and hard-negative
//! sampling, LLM question/answer writing, ROUGE-L deduplication, leakage-free
//! splitting and conversion from an external QA format.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, PassageStore};
use crate::error::{Result, RqaError};
use crate::evaluation::metrics::rouge_l;
use crate::llm::{LlmClient, PromptTemplate, SamplingParams};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.7;
pub const DEFAULT_HARD_NEGATIVES: usize = 4;
pub const DEFAULT_QUESTIONS_PER_PASSAGE: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = RqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(RqaError::schema("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub gold_passage_id: String,
    #[serde(default)]
    pub hard_negative_ids: Vec<String>,
    #[serde(default)]
    pub split: Split,
}

impl QAPair {
    /// Checks the pair against the store it refers to.
    pub fn validate(&self, store: &PassageStore) -> Result<()> {
        let Some(gold) = store.get(&self.gold_passage_id) else {
            return Err(RqaError::Precondition(format!(
                "gold passage {} is not in the store",
                self.gold_passage_id
            )));
        };
        for neg in &self.hard_negative_ids {
            if *neg == self.gold_passage_id {
                return Err(RqaError::Precondition(format!(
                    "gold passage {neg} listed as its own hard negative"
                )));
            }
            match store.get(neg) {
                Some(p) if p.source == gold.source => {}
                Some(_) => {
                    return Err(RqaError::Precondition(format!(
                        "hard negative {neg} comes from a different source than its gold passage"
                    )))
                }
                None => {
                    return Err(RqaError::Precondition(format!(
                        "hard negative {neg} is not in the store"
                    )))
                }
            }
        }
        Ok(())
    }
}

pub fn save_pairs(pairs: &[QAPair], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<QAPair>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line).map_err(|e| RqaError::Load {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(pairs)
}

/// A gold passage and the same-source passages sampled as its hard negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldSample {
    pub gold_passage_id: String,
    pub hard_negative_ids: Vec<String>,
}

/// Samples `n_gold` distinct gold passages; for each, up to `n_hard_neg`
/// other passages from the same source, uniformly without replacement.
pub fn sample_gold_and_negatives(
    store: &PassageStore,
    n_gold: usize,
    n_hard_neg: usize,
    rng_seed: u64,
) -> Result<Vec<GoldSample>> {
    if n_gold > store.len() {
        return Err(RqaError::InsufficientCorpus {
            requested: n_gold,
            available: store.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut siblings: HashMap<&str, Vec<&Passage>> = HashMap::new();
    for (source, members) in store.by_source() {
        siblings.insert(source, members);
    }
    let passages = store.passages();
    let golds = index::sample(&mut rng, passages.len(), n_gold);
    let mut out = Vec::with_capacity(n_gold);
    for gi in golds.iter() {
        let gold = &passages[gi];
        let candidates: Vec<&Passage> = siblings[gold.source.as_str()]
            .iter()
            .filter(|p| p.passage_id != gold.passage_id)
            .copied()
            .collect();
        let take = n_hard_neg.min(candidates.len());
        let negatives = index::sample(&mut rng, candidates.len(), take)
            .iter()
            .map(|i| candidates[i].passage_id.clone())
            .collect();
        out.push(GoldSample {
            gold_passage_id: gold.passage_id.clone(),
            hard_negative_ids: negatives,
        });
    }
    Ok(out)
}

/// Settings shared by question and answer generation.
#[derive(Clone, Debug)]
pub struct GenerationSettings {
    pub sampling: SamplingParams,
    /// Maximum number of concurrent client calls.
    pub parallelism: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            sampling: SamplingParams::default(),
            parallelism: 4,
        }
    }
}

fn with_passage_context(err: RqaError, passage_id: &str) -> RqaError {
    let context = Some(format!("passage {passage_id}"));
    match err {
        RqaError::GenerationBackend { message, .. } => RqaError::GenerationBackend { context, message },
        other => RqaError::GenerationBackend {
            context,
            message: other.to_string(),
        },
    }
}

/// Runs `f` over `items` with at most `parallelism` threads, preserving order.
fn ordered_parallel<T: Sync, U: Send>(
    items: &[T],
    parallelism: usize,
    f: impl Fn(&T) -> Result<U> + Sync + Send,
) -> Result<Vec<U>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| RqaError::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedQuestion {
    pub question: String,
    pub gold_passage_id: String,
}

/// Asks `client` for `questions_per_passage` questions about every passage
/// accepted by `filter_fn`. Call `i` for a passage uses sampling seed
/// `seed + i`; empty responses are dropped.
pub fn generate_questions(
    client: &dyn LlmClient,
    gold: &[&Passage],
    questions_per_passage: usize,
    prompt_template: &PromptTemplate,
    filter_fn: &(dyn Fn(&Passage) -> bool + Sync),
    settings: &GenerationSettings,
) -> Result<Vec<GeneratedQuestion>> {
    if questions_per_passage == 0 {
        return Err(RqaError::Precondition(
            "questions_per_passage must be at least 1".into(),
        ));
    }
    let kept: Vec<&Passage> = gold.iter().copied().filter(|p| filter_fn(p)).collect();
    let jobs: Vec<(&Passage, usize)> = kept
        .iter()
        .flat_map(|p| (0..questions_per_passage).map(move |i| (*p, i)))
        .collect();
    let responses = ordered_parallel(&jobs, settings.parallelism, |(p, i)| {
        let prompt = prompt_template.render(&[("passage", &p.content)]);
        let sampling = settings.sampling.with_seed(settings.sampling.seed.wrapping_add(*i as u64));
        client
            .generate(&prompt, &sampling)
            .map_err(|e| with_passage_context(e, &p.passage_id))
    })?;
    Ok(jobs
        .iter()
        .zip(responses)
        .filter_map(|((p, _), q)| {
            let q = q.trim();
            (!q.is_empty()).then(|| GeneratedQuestion {
                question: q.to_string(),
                gold_passage_id: p.passage_id.clone(),
            })
        })
        .collect())
}

/// Keeps a question only if its ROUGE-L F1 against every previously kept
/// question is at most `rouge_l_threshold`. Order-stable.
pub fn dedup_questions(
    questions: Vec<GeneratedQuestion>,
    rouge_l_threshold: f64,
) -> Result<Vec<GeneratedQuestion>> {
    if !(0.0..=1.0).contains(&rouge_l_threshold) {
        return Err(RqaError::Precondition(format!(
            "ROUGE-L threshold must be in [0, 1], got {rouge_l_threshold}"
        )));
    }
    let mut kept: Vec<GeneratedQuestion> = Vec::new();
    for q in questions {
        if kept
            .iter()
            .all(|k| rouge_l(&q.question, &k.question) <= rouge_l_threshold)
        {
            kept.push(q);
        }
    }
    Ok(kept)
}

/// A question waiting for its answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuestionItem {
    pub question: String,
    pub gold_passage_id: String,
    pub hard_negative_ids: Vec<String>,
}

/// Asks `client` to answer each question from its gold passage.
pub fn generate_answers(
    client: &dyn LlmClient,
    items: &[QuestionItem],
    store: &PassageStore,
    prompt_template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<Vec<QAPair>> {
    let mut resolved = Vec::with_capacity(items.len());
    for item in items {
        let passage = store.get(&item.gold_passage_id).ok_or_else(|| {
            RqaError::Precondition(format!(
                "question {:?} references unknown passage {}",
                item.question, item.gold_passage_id
            ))
        })?;
        resolved.push((item, passage));
    }
    let answers = ordered_parallel(&resolved, settings.parallelism, |(item, p)| {
        let prompt = prompt_template.render(&[("passage", &p.content), ("question", &item.question)]);
        client
            .generate(&prompt, &settings.sampling)
            .map_err(|e| with_passage_context(e, &p.passage_id))
    })?;
    Ok(resolved
        .into_iter()
        .zip(answers)
        .map(|((item, _), answer)| QAPair {
            question: item.question.clone(),
            answer: answer.trim().to_string(),
            gold_passage_id: item.gold_passage_id.clone(),
            hard_negative_ids: item.hard_negative_ids.clone(),
            split: Split::Train,
        })
        .collect())
}

/// End-to-end generation settings.
pub struct DatagenConfig<'a> {
    pub n_gold: usize,
    pub n_hard_neg: usize,
    pub questions_per_passage: usize,
    pub dedup_threshold: f64,
    pub seed: u64,
    pub question_template: PromptTemplate,
    pub answer_template: PromptTemplate,
    pub filter_fn: &'a (dyn Fn(&Passage) -> bool + Sync),
    pub settings: GenerationSettings,
}

impl DatagenConfig<'_> {
    pub fn new(n_gold: usize, seed: u64) -> Self {
        DatagenConfig {
            n_gold,
            n_hard_neg: DEFAULT_HARD_NEGATIVES,
            questions_per_passage: DEFAULT_QUESTIONS_PER_PASSAGE,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            seed,
            question_template: PromptTemplate::question_generation(),
            answer_template: PromptTemplate::answer_generation(),
            filter_fn: &|_| true,
            settings: GenerationSettings {
                sampling: SamplingParams {
                    seed,
                    ..SamplingParams::default()
                },
                ..GenerationSettings::default()
            },
        }
    }
}

/// Sample → write questions → deduplicate → write answers.
pub fn generate_dataset(
    store: &PassageStore,
    question_client: &dyn LlmClient,
    answer_client: &dyn LlmClient,
    config: &DatagenConfig<'_>,
) -> Result<Vec<QAPair>> {
    let samples = sample_gold_and_negatives(store, config.n_gold, config.n_hard_neg, config.seed)?;
    let negatives: HashMap<&str, &Vec<String>> = samples
        .iter()
        .map(|s| (s.gold_passage_id.as_str(), &s.hard_negative_ids))
        .collect();
    let gold: Vec<&Passage> = samples
        .iter()
        .map(|s| store.get(&s.gold_passage_id).expect("sampled from store"))
        .collect();
    let questions = generate_questions(
        question_client,
        &gold,
        config.questions_per_passage,
        &config.question_template,
        config.filter_fn,
        &config.settings,
    )?;
    let questions = dedup_questions(questions, config.dedup_threshold)?;
    let items: Vec<QuestionItem> = questions
        .into_iter()
        .map(|q| QuestionItem {
            hard_negative_ids: negatives[q.gold_passage_id.as_str()].clone(),
            question: q.question,
            gold_passage_id: q.gold_passage_id,
        })
        .collect();
    generate_answers(answer_client, &items, store, &config.answer_template, &config.settings)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<QAPair>,
    pub validation: Vec<QAPair>,
    pub test: Vec<QAPair>,
}

impl DatasetSplits {
    pub fn all(&self) -> impl Iterator<Item = &QAPair> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Splits `pairs` into train/validation/test of exactly the requested sizes
/// so that no gold passage appears in more than one split. Pairs are grouped
/// by gold passage, groups are shuffled with `rng_seed` and dealt to train,
/// then validation, then test; when a group is larger than what a split still
/// needs, its surplus pairs are discarded.
pub fn split_dataset(
    pairs: &[QAPair],
    n_train: usize,
    n_val: usize,
    n_test: usize,
    rng_seed: u64,
) -> Result<DatasetSplits> {
    let wanted = n_train + n_val + n_test;
    if wanted > pairs.len() {
        return Err(RqaError::InsufficientData(format!(
            "{wanted} pairs requested, {} available",
            pairs.len()
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&QAPair>> = HashMap::new();
    for p in pairs {
        let key = p.gold_passage_id.as_str();
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    order.shuffle(&mut rng);

    let mut splits = DatasetSplits::default();
    let mut next_group = order.into_iter();
    for (split, target, n) in [
        (Split::Train, &mut splits.train, n_train),
        (Split::Validation, &mut splits.validation, n_val),
        (Split::Test, &mut splits.test, n_test),
    ] {
        while target.len() < n {
            let Some(key) = next_group.next() else {
                return Err(RqaError::InsufficientData(format!(
                    "ran out of distinct gold passages while filling the {split:?} split"
                )));
            };
            let need = n - target.len();
            target.extend(groups[key].iter().take(need).map(|p| QAPair {
                split,
                ..(*p).clone()
            }));
        }
    }
    Ok(splits)
}

#[derive(Deserialize)]
struct GenericPositive {
    content: String,
    source: String,
}

#[derive(Deserialize)]
struct GenericRecord {
    question: String,
    answer: String,
    positive_passages: Vec<GenericPositive>,
    #[serde(default)]
    split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvertedQa {
    pub passages: Vec<Passage>,
    pub pairs: Vec<QAPair>,
}

/// Converts JSONL records of the form
/// `{"question", "answer", "positive_passages": [{"content", "source"}], "split"?}`.
/// The first positive passage becomes the gold passage; passages are
/// deduplicated by (content, source).
pub fn convert_generic_qa(jsonl: &str, tokenizer: &dyn Tokenizer) -> Result<ConvertedQa> {
    let mut out = ConvertedQa::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (index, line) in jsonl.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let record: GenericRecord = serde_json::from_str(line)
            .map_err(|e| RqaError::schema(format!("record {index}"), e.to_string()))?;
        if record.positive_passages.is_empty() {
            return Err(RqaError::schema(
                format!("record {index}"),
                "positive_passages is empty",
            ));
        }
        let mut gold_id = None;
        for positive in &record.positive_passages {
            let seq_num = out.passages.len() as i64;
            let passage = Passage::new(positive.content.clone(), positive.source.clone(), seq_num, tokenizer);
            gold_id.get_or_insert_with(|| passage.passage_id.clone());
            if seen.insert(passage.passage_id.clone()) {
                out.passages.push(passage);
            }
        }
        out.pairs.push(QAPair {
            question: record.question,
            answer: record.answer,
            gold_passage_id: gold_id.expect("at least one positive"),
            hard_negative_ids: Vec::new(),
            split: record.split.unwrap_or_default(),
        });
    }
    Ok(out)
}
