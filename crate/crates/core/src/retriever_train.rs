//! Retriever training: contrastive learning (CTL) and distillation from an
//! encoder-decoder's cross-attention (DCA) or a decoder's answer likelihood
//! (RPG).

use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, PassageStore};
use crate::datagen::QAPair;
use crate::error::{Result, RqaError};
use crate::generation::{answer_loglikelihood, BackendKind, GeneratorBackend, PromptAssembly};
use crate::nn::matrix::softmax;
use crate::nn::{Adam, AdamConfig, Bound, Graph, LinearEmbedder, Matrix, ParamSet, TinyEncoderDecoder, Var};
use crate::retrieval::Embedder;

/// Additive logit for candidates a query must not see.
const EXCLUDED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverAlgorithm {
    Ctl,
    Dca,
    Rpg,
}

impl FromStr for RetrieverAlgorithm {
    type Err = RqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ctl" => Ok(RetrieverAlgorithm::Ctl),
            "dca" => Ok(RetrieverAlgorithm::Dca),
            "rpg" => Ok(RetrieverAlgorithm::Rpg),
            other => Err(RqaError::Config(format!("unknown retriever algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverTrainConfig {
    pub algorithm: RetrieverAlgorithm,
    /// CTL similarity temperature.
    pub temperature_tau: f64,
    /// RPG retriever temperature.
    pub gamma: f64,
    /// RPG likelihood temperature.
    pub beta: f64,
    /// DCA retriever temperature.
    pub dca_temperature: f64,
    /// Passages scored per query by the distillation losses.
    pub k_train: usize,
    /// Hard negatives used per query by CTL.
    pub hard_negatives: usize,
    /// Whether CTL scores each query against the other queries' positives.
    pub in_batch_negatives: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl RetrieverTrainConfig {
    pub fn new(algorithm: RetrieverAlgorithm) -> Self {
        RetrieverTrainConfig {
            algorithm,
            temperature_tau: 0.05,
            gamma: 0.1,
            beta: 1.0,
            dca_temperature: 1.0,
            k_train: 8,
            hard_negatives: crate::datagen::DEFAULT_HARD_NEGATIVES,
            in_batch_negatives: true,
            batch_size: 16,
            learning_rate: 1e-2,
            max_steps: 500,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("temperature_tau", self.temperature_tau),
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("dca_temperature", self.dca_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(RqaError::Config(format!("{name} must be positive, got {t}")));
            }
        }
        if self.algorithm != RetrieverAlgorithm::Ctl && self.k_train < 2 {
            return Err(RqaError::Config("k_train must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(RqaError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// An embedder whose parameters can be trained through a [`Graph`].
pub trait TrainableEmbedder: Embedder {
    fn params(&self) -> &ParamSet;

    fn set_params(&mut self, params: ParamSet) -> Result<()>;

    fn embed_queries(&self, g: &mut Graph, b: &Bound, texts: &[&str]) -> Var;

    fn embed_passages(&self, g: &mut Graph, b: &Bound, texts: &[&str]) -> Var;
}

impl TrainableEmbedder for LinearEmbedder {
    fn params(&self) -> &ParamSet {
        LinearEmbedder::params(self)
    }

    fn set_params(&mut self, params: ParamSet) -> Result<()> {
        LinearEmbedder::set_params(self, params)
    }

    fn embed_queries(&self, g: &mut Graph, b: &Bound, texts: &[&str]) -> Var {
        self.embed_graph(g, b, texts)
    }

    fn embed_passages(&self, g: &mut Graph, b: &Bound, texts: &[&str]) -> Var {
        self.embed_graph(g, b, texts)
    }
}

/// Which candidate columns each query may score in [`ctl_loss`].
///
/// Columns are the `n` in-batch positives followed by every hard negative;
/// `negative_owner[j]` is the query the j-th hard negative belongs to. A
/// query sees its own positive, its own hard negatives, and (with in-batch
/// negatives on) other queries' positives unless they are the same passage.
pub fn ctl_mask(n: usize, negative_owner: &[usize], in_batch: bool, positive_ids: Option<&[String]>) -> Matrix {
    let mut mask = Matrix::zeros(n, n + negative_owner.len());
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let duplicate = positive_ids.is_some_and(|ids| ids[i] == ids[j]);
            if !in_batch || duplicate {
                mask.set(i, j, EXCLUDED);
            }
        }
        for (j, &owner) in negative_owner.iter().enumerate() {
            if owner != i {
                mask.set(i, n + j, EXCLUDED);
            }
        }
    }
    mask
}

/// InfoNCE: mean over queries of `-log softmax(<q_i, c> / tau)[p_i]`, with
/// candidates restricted by `mask` (see [`ctl_mask`]).
pub fn ctl_loss(
    g: &mut Graph,
    queries: Var,
    positives: Var,
    hard_negatives: Option<Var>,
    tau: f64,
    mask: &Matrix,
) -> Result<Var> {
    let n = g.value(queries).rows();
    for v in [Some(queries), Some(positives), hard_negatives].into_iter().flatten() {
        if !g.value(v).is_finite() {
            return Err(RqaError::Numerical("contrastive loss input".into()));
        }
    }
    let candidates = match hard_negatives {
        Some(neg) => g.concat_rows(&[positives, neg]),
        None => positives,
    };
    if mask.shape() != (n, g.value(candidates).rows()) {
        return Err(RqaError::Shape(format!(
            "mask is {:?}, scores are {:?}",
            mask.shape(),
            (n, g.value(candidates).rows())
        )));
    }
    let scores = g.matmul_t(queries, candidates);
    let scores = g.scale(scores, 1.0 / tau);
    let scores = g.add_const(scores, mask);
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    Ok(g.cross_entropy(scores, &targets))
}

/// Per-passage share of cross-attention mass.
///
/// Each matrix in `attention` is one layer/head map of shape (decoder
/// positions × encoder tokens), with encoder tokens laid out passage by
/// passage according to `passage_lengths`. Mass is summed over each
/// passage's tokens, averaged over maps and decoder positions, and
/// renormalized.
pub fn dca_targets(attention: &[Matrix], passage_lengths: &[usize]) -> Result<Vec<f64>> {
    if attention.is_empty() || passage_lengths.is_empty() {
        return Err(RqaError::Shape("no attention maps or no passages".into()));
    }
    let total_len: usize = passage_lengths.iter().sum();
    let mut mass = vec![0.0; passage_lengths.len()];
    let mut rows = 0usize;
    for map in attention {
        if map.cols() != total_len {
            return Err(RqaError::Shape(format!(
                "attention covers {} encoder tokens, passages account for {total_len}",
                map.cols()
            )));
        }
        for r in 0..map.rows() {
            let mut start = 0;
            for (m, &len) in mass.iter_mut().zip(passage_lengths) {
                *m += map.row(r)[start..start + len].iter().sum::<f64>();
                start += len;
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(RqaError::Shape("attention maps have no decoder positions".into()));
    }
    if !mass.iter().all(|m| m.is_finite() && *m >= 0.0) {
        return Err(RqaError::Numerical("attention mass".into()));
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(RqaError::Numerical("attention mass sums to zero".into()));
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// `softmax(lm_loglik / beta)`.
pub fn rpg_targets(lm_loglik: &[f64], beta: f64) -> Result<Vec<f64>> {
    if lm_loglik.len() < 2 {
        return Err(RqaError::Precondition("need at least two passages".into()));
    }
    if !lm_loglik.iter().all(|x| x.is_finite()) {
        return Err(RqaError::Numerical("answer log-likelihoods".into()));
    }
    let scaled: Vec<f64> = lm_loglik.iter().map(|l| l / beta).collect();
    Ok(softmax(&scaled))
}

/// Mean over rows of `KL(Q ‖ softmax(scores / temp))`. `targets` (Q) are
/// constants, so no gradient flows into them.
pub fn distill_loss(g: &mut Graph, scores: Var, targets: &Matrix, temp: f64) -> Result<Var> {
    if g.value(scores).shape() != targets.shape() {
        return Err(RqaError::Shape(format!(
            "scores are {:?}, targets are {:?}",
            g.value(scores).shape(),
            targets.shape()
        )));
    }
    if !g.value(scores).is_finite() || !targets.is_finite() {
        return Err(RqaError::Numerical("distillation loss input".into()));
    }
    let n = targets.rows() as f64;
    let entropy_term: f64 = targets
        .data()
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|q| q * q.ln())
        .sum::<f64>()
        / n;
    let scaled = g.scale(scores, 1.0 / temp);
    let log_p = g.log_softmax_rows(scaled);
    let cross = g.weighted_sum(log_p, targets.map(|q| -q / n));
    Ok(g.add_const(cross, &Matrix::scalar(entropy_term)))
}

/// Supplies cross-attention maps for DCA.
pub trait CrossAttentionTeacher: Send + Sync {
    /// Attention maps (see [`dca_targets`]) and per-passage encoder lengths
    /// while reading `passages` and producing `answer`.
    fn cross_attention(&self, question: &str, passages: &[&str], answer: &str) -> Result<(Vec<Matrix>, Vec<usize>)>;
}

impl CrossAttentionTeacher for TinyEncoderDecoder {
    fn cross_attention(&self, question: &str, passages: &[&str], answer: &str) -> Result<(Vec<Matrix>, Vec<usize>)> {
        let inputs: Vec<Vec<usize>> = passages.iter().map(|p| self.fid_input_ids(question, p)).collect();
        TinyEncoderDecoder::cross_attention(self, &inputs, &self.encode(answer))
    }
}

/// Supplies `log P(answer | question, passage)` for RPG.
pub trait LikelihoodTeacher: Send + Sync {
    fn answer_loglikelihood(&self, question: &str, passage: &Passage, answer: &str) -> Result<f64>;
}

/// A decoder backend scoring answers through the standard prompt.
pub struct DecoderTeacher {
    backend: Arc<dyn GeneratorBackend>,
    assembly: PromptAssembly,
}

impl DecoderTeacher {
    pub fn new(backend: Arc<dyn GeneratorBackend>, assembly: PromptAssembly) -> Result<Self> {
        if backend.kind() != BackendKind::Decoder {
            return Err(RqaError::Config(format!(
                "likelihood distillation needs a decoder, `{}` is {:?}",
                backend.identity(),
                backend.kind()
            )));
        }
        Ok(DecoderTeacher { backend, assembly })
    }
}

impl LikelihoodTeacher for DecoderTeacher {
    fn answer_loglikelihood(&self, question: &str, passage: &Passage, answer: &str) -> Result<f64> {
        answer_loglikelihood(self.backend.as_ref(), question, passage, answer, &self.assembly)
    }
}

/// Teacher model for the distillation algorithms.
#[derive(Clone, Default)]
pub enum AuxModel {
    #[default]
    None,
    CrossAttention(Arc<dyn CrossAttentionTeacher>),
    Likelihood(Arc<dyn LikelihoodTeacher>),
}

fn resolve<'s>(store: &'s PassageStore, id: &str) -> Result<&'s Passage> {
    store
        .get(id)
        .ok_or_else(|| RqaError::Precondition(format!("passage {id} is not in the store")))
}

/// Gold passage first, then hard negatives, then random fill, `k` in total.
fn distill_candidates<'s>(
    pair: &QAPair,
    store: &'s PassageStore,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'s Passage>> {
    let mut out = vec![resolve(store, &pair.gold_passage_id)?];
    for id in &pair.hard_negative_ids {
        if out.len() == k {
            break;
        }
        let p = resolve(store, id)?;
        if !out.iter().any(|o| o.passage_id == p.passage_id) {
            out.push(p);
        }
    }
    let others: Vec<&Passage> = store
        .iter()
        .filter(|p| !out.iter().any(|o| o.passage_id == p.passage_id))
        .collect();
    let need = (k - out.len()).min(others.len());
    for i in index::sample(rng, others.len(), need).iter() {
        out.push(others[i]);
    }
    Ok(out)
}

struct DistillExample<'s> {
    question: &'s str,
    candidates: Vec<&'s Passage>,
    targets: Vec<f64>,
}

fn teacher_targets<'s>(
    pairs: &'s [QAPair],
    store: &'s PassageStore,
    config: &RetrieverTrainConfig,
    aux: &AuxModel,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DistillExample<'s>>> {
    let k = config.k_train.min(store.len());
    if k < 2 {
        return Err(RqaError::InsufficientCorpus {
            requested: 2,
            available: store.len(),
        });
    }
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let candidates = distill_candidates(pair, store, k, rng)?;
        let targets = match (config.algorithm, aux) {
            (RetrieverAlgorithm::Dca, AuxModel::CrossAttention(teacher)) => {
                let texts: Vec<&str> = candidates.iter().map(|p| p.content.as_str()).collect();
                let (maps, lengths) = teacher.cross_attention(&pair.question, &texts, &pair.answer)?;
                dca_targets(&maps, &lengths)?
            }
            (RetrieverAlgorithm::Rpg, AuxModel::Likelihood(teacher)) => {
                let ll = candidates
                    .iter()
                    .map(|p| teacher.answer_loglikelihood(&pair.question, p, &pair.answer))
                    .collect::<Result<Vec<_>>>()?;
                rpg_targets(&ll, config.beta)?
            }
            _ => unreachable!("checked by train_retriever"),
        };
        out.push(DistillExample {
            question: &pair.question,
            candidates,
            targets,
        });
    }
    Ok(out)
}

/// Cycles through shuffled epochs of `0..n`.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            cursor: n,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

pub(crate) fn batch_sampler(n: usize, seed: u64) -> impl FnMut(usize) -> Vec<usize> {
    let mut s = BatchSampler::new(n, ChaCha8Rng::seed_from_u64(seed));
    move |size| s.next_batch(size)
}

fn ctl_batch_loss<E: TrainableEmbedder>(
    embedder: &E,
    g: &mut Graph,
    b: &Bound,
    batch: &[&QAPair],
    store: &PassageStore,
    config: &RetrieverTrainConfig,
) -> Result<Var> {
    let questions: Vec<&str> = batch.iter().map(|p| p.question.as_str()).collect();
    let mut positive_ids = Vec::with_capacity(batch.len());
    let mut positives = Vec::with_capacity(batch.len());
    let mut negatives = Vec::new();
    let mut owners = Vec::new();
    for (i, pair) in batch.iter().enumerate() {
        positives.push(resolve(store, &pair.gold_passage_id)?.content.as_str());
        positive_ids.push(pair.gold_passage_id.clone());
        for id in pair.hard_negative_ids.iter().take(config.hard_negatives) {
            negatives.push(resolve(store, id)?.content.as_str());
            owners.push(i);
        }
    }
    let q = embedder.embed_queries(g, b, &questions);
    let p = embedder.embed_passages(g, b, &positives);
    let neg = (!negatives.is_empty()).then(|| embedder.embed_passages(g, b, &negatives));
    let mask = ctl_mask(batch.len(), &owners, config.in_batch_negatives, Some(&positive_ids));
    ctl_loss(g, q, p, neg, config.temperature_tau, &mask)
}

fn distill_batch_loss<E: TrainableEmbedder>(
    embedder: &E,
    g: &mut Graph,
    b: &Bound,
    batch: &[&DistillExample<'_>],
    temp: f64,
) -> Result<Var> {
    let k = batch[0].candidates.len();
    let questions: Vec<&str> = batch.iter().map(|e| e.question).collect();
    let passages: Vec<&str> = batch
        .iter()
        .flat_map(|e| e.candidates.iter().map(|p| p.content.as_str()))
        .collect();
    let q = embedder.embed_queries(g, b, &questions);
    let c = embedder.embed_passages(g, b, &passages);
    let mut rows = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let qi = g.gather_rows(q, &[i]);
        let ci = g.gather_rows(c, &(i * k..(i + 1) * k).collect::<Vec<_>>());
        rows.push(g.matmul_t(qi, ci));
    }
    let scores = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
    let mut targets = Matrix::zeros(batch.len(), k);
    for (i, e) in batch.iter().enumerate() {
        targets.row_mut(i).copy_from_slice(&e.targets);
    }
    distill_loss(g, scores, &targets, temp)
}

/// Trains `embedder` in place for `config.max_steps` Adam steps.
pub fn train_retriever<E: TrainableEmbedder>(
    embedder: &mut E,
    data: &[QAPair],
    store: &PassageStore,
    config: &RetrieverTrainConfig,
    aux: &AuxModel,
) -> Result<TrainLog> {
    config.validate()?;
    match (config.algorithm, aux) {
        (RetrieverAlgorithm::Ctl, _)
        | (RetrieverAlgorithm::Dca, AuxModel::CrossAttention(_))
        | (RetrieverAlgorithm::Rpg, AuxModel::Likelihood(_)) => {}
        (RetrieverAlgorithm::Dca, _) => {
            return Err(RqaError::Config("DCA needs an encoder-decoder cross-attention teacher".into()))
        }
        (RetrieverAlgorithm::Rpg, _) => {
            return Err(RqaError::Config("RPG needs a decoder likelihood teacher".into()))
        }
    }
    if data.is_empty() {
        return Err(RqaError::InsufficientData("no training pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let distill = match config.algorithm {
        RetrieverAlgorithm::Ctl => Vec::new(),
        _ => teacher_targets(data, store, config, aux, &mut rng)?,
    };
    let temp = match config.algorithm {
        RetrieverAlgorithm::Rpg => config.gamma,
        _ => config.dca_temperature,
    };
    let mut next_batch = batch_sampler(data.len(), config.seed.wrapping_add(1));
    let mut params = embedder.params().clone();
    let mut adam = Adam::new(AdamConfig::new(config.learning_rate, config.max_steps));
    let mut log = TrainLog::default();
    for step in 0..config.max_steps {
        let idx = next_batch(config.batch_size);
        let mut g = Graph::new();
        let b = g.bind(&params);
        let loss = match config.algorithm {
            RetrieverAlgorithm::Ctl => {
                let batch: Vec<&QAPair> = idx.iter().map(|&i| &data[i]).collect();
                ctl_batch_loss(embedder, &mut g, &b, &batch, store, config)?
            }
            _ => {
                let batch: Vec<&DistillExample> = idx.iter().map(|&i| &distill[i]).collect();
                distill_batch_loss(embedder, &mut g, &b, &batch, temp)?
            }
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(RqaError::Numerical(format!("loss at step {step}")));
        }
        let grads = g.backward(loss);
        adam.step(&mut params, &b.grads(&g, &grads));
        log.losses.push(value);
        if step % 100 == 0 {
            tracing::debug!(step, loss = value, "retriever step");
        }
    }
    if config.max_steps > 0 {
        embedder.set_params(params)?;
    }
    Ok(log)
}
