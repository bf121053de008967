//! Generator training: supervised finetuning on gold passages (SFT), on
//! passages from a frozen retriever (SwR), and fusion-in-decoder (FiD).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, PassageStore};
use crate::datagen::QAPair;
use crate::error::{Result, RqaError};
use crate::generation::{FidInput, PromptAssembly};
use crate::nn::{Adam, AdamConfig, Bound, Graph, ParamSet, TinyDecoder, TinyEncoderDecoder, Var};
use crate::retrieval::Retriever;
use crate::retriever_train::batch_sampler;
use crate::session::DialogueSession;

pub use crate::retriever_train::TrainLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorAlgorithm {
    Sft,
    Swr,
    Fid,
}

impl FromStr for GeneratorAlgorithm {
    type Err = RqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sft" => Ok(GeneratorAlgorithm::Sft),
            "swr" => Ok(GeneratorAlgorithm::Swr),
            "fid" => Ok(GeneratorAlgorithm::Fid),
            other => Err(RqaError::Config(format!("unknown generator algorithm `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub algorithm: GeneratorAlgorithm,
    /// Retrieved passages per training context (SwR and FiD).
    pub k_context: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
    /// Train on answer tokens only.
    pub loss_mask: bool,
}

impl GeneratorTrainConfig {
    pub fn new(algorithm: GeneratorAlgorithm) -> Self {
        GeneratorTrainConfig {
            algorithm,
            k_context: 4,
            batch_size: 8,
            learning_rate: 3e-3,
            max_steps: 300,
            seed: 0,
            loss_mask: true,
        }
    }
}

/// A locally trainable generator.
#[derive(Clone, Debug)]
pub enum LocalGenerator {
    Decoder(TinyDecoder),
    EncoderDecoder(TinyEncoderDecoder),
}

impl LocalGenerator {
    pub fn params(&self) -> &ParamSet {
        match self {
            LocalGenerator::Decoder(m) => m.params(),
            LocalGenerator::EncoderDecoder(m) => m.params(),
        }
    }

    fn set_params(&mut self, params: ParamSet) -> Result<()> {
        match self {
            LocalGenerator::Decoder(m) => m.set_params(params),
            LocalGenerator::EncoderDecoder(m) => m.set_params(params),
        }
    }
}

fn resolve<'s>(store: &'s PassageStore, id: &str) -> Result<&'s Passage> {
    store
        .get(id)
        .ok_or_else(|| RqaError::Precondition(format!("gold passage {id} is not in the store")))
}

/// `(prompt, answer)` with the gold passage as the only context.
pub fn sft_examples(pairs: &[QAPair], store: &PassageStore, assembly: &PromptAssembly) -> Result<Vec<(String, String)>> {
    let empty = DialogueSession::default();
    pairs
        .iter()
        .map(|p| {
            let gold = resolve(store, &p.gold_passage_id)?;
            Ok((assembly.assemble(&p.question, &[gold], &empty)?, p.answer.clone()))
        })
        .collect()
}

fn retrieve_passages<'s>(
    retriever: &dyn Retriever,
    store: &'s PassageStore,
    question: &str,
    k: usize,
) -> Result<Vec<&'s Passage>> {
    retriever
        .retrieve(question, k)?
        .hits
        .iter()
        .map(|h| resolve(store, &h.passage_id))
        .collect()
}

/// `(prompt, answer)` with the frozen retriever's top `k_context` passages as
/// context, whether or not they contain the gold passage.
pub fn swr_build_examples(
    retriever: &dyn Retriever,
    pairs: &[QAPair],
    store: &PassageStore,
    k_context: usize,
    assembly: &PromptAssembly,
) -> Result<Vec<(String, String)>> {
    if k_context == 0 {
        return Err(RqaError::Config("k_context must be at least 1".into()));
    }
    let empty = DialogueSession::default();
    pairs
        .iter()
        .map(|p| {
            let passages = retrieve_passages(retriever, store, &p.question, k_context)?;
            Ok((assembly.assemble(&p.question, &passages, &empty)?, p.answer.clone()))
        })
        .collect()
}

/// FiD training inputs: the retriever's top `k_context` passages, with the
/// gold passage replacing the lowest-ranked hit when it is missing.
pub fn fid_examples(
    retriever: &dyn Retriever,
    pairs: &[QAPair],
    store: &PassageStore,
    k_context: usize,
) -> Result<Vec<(FidInput, String)>> {
    if k_context == 0 {
        return Err(RqaError::Config("k_context must be at least 1".into()));
    }
    pairs
        .iter()
        .map(|p| {
            let gold = resolve(store, &p.gold_passage_id)?;
            let mut passages = retrieve_passages(retriever, store, &p.question, k_context)?;
            if !passages.iter().any(|x| x.passage_id == gold.passage_id) {
                if passages.len() == k_context {
                    passages.pop();
                }
                passages.push(gold);
            }
            Ok((FidInput::new(p.question.clone(), &passages), p.answer.clone()))
        })
        .collect()
}

/// Mean next-token cross-entropy of the answers (plus `<eos>`) given their
/// prompts.
pub fn sft_loss(model: &TinyDecoder, g: &mut Graph, b: &Bound, batch: &[(String, String)], loss_mask: bool) -> Result<Var> {
    let ids: Vec<(Vec<usize>, Vec<usize>)> = batch
        .iter()
        .map(|(prompt, answer)| (model.encode(prompt), model.encode(answer)))
        .collect();
    model.sequence_loss(g, b, &ids, loss_mask)
}

/// Seq2seq cross-entropy of the answers given fused passage encodings.
pub fn fid_loss(model: &TinyEncoderDecoder, g: &mut Graph, b: &Bound, batch: &[(FidInput, String)]) -> Result<Var> {
    let ids = batch
        .iter()
        .map(|(input, answer)| Ok((model.fid_inputs(input)?, model.encode(answer))))
        .collect::<Result<Vec<_>>>()?;
    model.answer_loss(g, b, &ids)
}

enum Examples {
    Prompts(Vec<(String, String)>),
    Fid(Vec<(FidInput, String)>),
}

impl Examples {
    fn len(&self) -> usize {
        match self {
            Examples::Prompts(v) => v.len(),
            Examples::Fid(v) => v.len(),
        }
    }
}

/// Trains `model` in place for `config.max_steps` Adam steps. SwR and FiD
/// need a frozen `retriever`; its contexts are computed once up front.
pub fn train_generator(
    model: &mut LocalGenerator,
    data: &[QAPair],
    store: &PassageStore,
    config: &GeneratorTrainConfig,
    retriever: Option<&dyn Retriever>,
    assembly: &PromptAssembly,
) -> Result<TrainLog> {
    if config.batch_size == 0 {
        return Err(RqaError::Config("batch_size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(RqaError::InsufficientData("no training pairs".into()));
    }
    let need_retriever = || {
        retriever.ok_or_else(|| RqaError::Config(format!("{:?} training needs a frozen retriever", config.algorithm)))
    };
    let examples = match (config.algorithm, &*model) {
        (GeneratorAlgorithm::Sft, LocalGenerator::Decoder(_)) => Examples::Prompts(sft_examples(data, store, assembly)?),
        (GeneratorAlgorithm::Swr, LocalGenerator::Decoder(_)) => {
            Examples::Prompts(swr_build_examples(need_retriever()?, data, store, config.k_context, assembly)?)
        }
        (GeneratorAlgorithm::Fid, LocalGenerator::EncoderDecoder(_)) => {
            Examples::Fid(fid_examples(need_retriever()?, data, store, config.k_context)?)
        }
        (algo, _) => {
            return Err(RqaError::Config(format!(
                "{algo:?} training is not available for this generator type"
            )))
        }
    };

    let mut next_batch = batch_sampler(examples.len(), config.seed);
    let mut params = model.params().clone();
    let mut adam = Adam::new(AdamConfig::new(config.learning_rate, config.max_steps));
    let mut log = TrainLog::default();
    for step in 0..config.max_steps {
        let idx = next_batch(config.batch_size);
        let mut g = Graph::new();
        let b = g.bind(&params);
        let loss = match (&*model, &examples) {
            (LocalGenerator::Decoder(m), Examples::Prompts(ex)) => {
                let batch: Vec<(String, String)> = idx.iter().map(|&i| ex[i].clone()).collect();
                sft_loss(m, &mut g, &b, &batch, config.loss_mask)?
            }
            (LocalGenerator::EncoderDecoder(m), Examples::Fid(ex)) => {
                let batch: Vec<(FidInput, String)> = idx.iter().map(|&i| ex[i].clone()).collect();
                fid_loss(m, &mut g, &b, &batch)?
            }
            _ => unreachable!("examples built for the model type"),
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(RqaError::Numerical(format!("loss at step {step}")));
        }
        let grads = g.backward(loss);
        adam.step(&mut params, &b.grads(&g, &grads));
        log.losses.push(value);
        if step % 50 == 0 {
            tracing::debug!(step, loss = value, "generator step");
        }
    }
    if config.max_steps > 0 {
        model.set_params(params)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{Hit, RetrievalResult};
    use crate::nn::TransformerConfig;
    use crate::tokenizer::WhitespaceTokenizer;

    /// Returns a fixed ranking regardless of the query.
    struct Fixed(Vec<String>);

    impl Retriever for Fixed {
        fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult> {
            Ok(RetrievalResult {
                query: query.into(),
                k,
                hits: self.0.iter().take(k).map(|id| Hit { passage_id: id.clone(), score: 0.0 }).collect(),
            })
        }
    }

    fn fixture() -> (PassageStore, Vec<QAPair>) {
        let passages: Vec<Passage> = (0..5)
            .map(|i| Passage::new(format!("passage number{i}"), "doc", i, &WhitespaceTokenizer))
            .collect();
        let pairs = vec![QAPair {
            question: "which one".into(),
            answer: "number4".into(),
            gold_passage_id: passages[4].passage_id.clone(),
            hard_negative_ids: vec![],
            split: Default::default(),
        }];
        (PassageStore::from_passages(passages), pairs)
    }

    #[test]
    fn swr_reduces_to_sft_when_gold_ranks_first() {
        let (store, pairs) = fixture();
        let gold_first = Fixed(vec![pairs[0].gold_passage_id.clone()]);
        let a = PromptAssembly::default();
        assert_eq!(
            swr_build_examples(&gold_first, &pairs, &store, 1, &a).unwrap(),
            sft_examples(&pairs, &store, &a).unwrap()
        );
    }

    #[test]
    fn fid_forces_gold_into_context() {
        let (store, pairs) = fixture();
        let ids: Vec<String> = store.iter().map(|p| p.passage_id.clone()).collect();
        let r = Fixed(ids[..4].to_vec());
        let ex = fid_examples(&r, &pairs, &store, 3).unwrap();
        assert_eq!(ex[0].0.passages.len(), 3);
        assert_eq!(ex[0].0.passages[2], "passage number4");
        assert_eq!(ex[0].0.passages[0], "passage number0");
    }

    #[test]
    fn algorithm_must_match_model() {
        let (store, pairs) = fixture();
        let cfg = TransformerConfig {
            d_model: 8,
            n_heads: 1,
            n_layers: 1,
            d_ff: 8,
            max_positions: 64,
            seed: 0,
        };
        let mut m = LocalGenerator::Decoder(TinyDecoder::for_texts("d", ["a"], cfg).unwrap());
        let a = PromptAssembly::default();
        let fid = GeneratorTrainConfig::new(GeneratorAlgorithm::Fid);
        assert!(matches!(train_generator(&mut m, &pairs, &store, &fid, None, &a), Err(RqaError::Config(_))));
        let swr = GeneratorTrainConfig::new(GeneratorAlgorithm::Swr);
        assert!(matches!(train_generator(&mut m, &pairs, &store, &swr, None, &a), Err(RqaError::Config(_))));
        let mut zero = GeneratorTrainConfig::new(GeneratorAlgorithm::Sft);
        zero.max_steps = 0;
        let before = m.params().digest();
        train_generator(&mut m, &pairs, &store, &zero, None, &a).unwrap();
        assert_eq!(m.params().digest(), before);
    }
}
