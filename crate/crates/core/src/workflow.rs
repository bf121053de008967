//! File-to-file steps of a full run: ingest, generate data, train, index and
//! evaluate. The `rqa` binary is a thin argument parser over these.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{ingest, read_documents, PassageStore};
use crate::datagen::{generate_dataset, load_pairs, save_pairs, split_dataset, DatagenConfig, QAPair, Split};
use crate::error::{Result, RqaError};
use crate::evaluation::{evaluate_pipeline, EvalOptions, EvalSummary};
use crate::generation::PromptAssembly;
use crate::generator_train::{train_generator, GeneratorAlgorithm, GeneratorTrainConfig, LocalGenerator};
use crate::llm::{client_by_name, PromptTemplate};
use crate::nn::{LinearEmbedder, LinearEmbedderConfig, TinyDecoder, TinyEncoderDecoder, TransformerConfig};
use crate::pipeline::{load_generator, load_retriever, PipelineManifest, SimpleRqaConfig, INDEX_FILE, PASSAGES_FILE};
use crate::retrieval::{Retriever, VectorIndex};
use crate::retriever_train::{train_retriever, AuxModel, DecoderTeacher, RetrieverAlgorithm, RetrieverTrainConfig};
use crate::tokenizer::WhitespaceTokenizer;

/// Reads a directory of `.txt`/`.md` files or a document JSONL and writes passages.
pub fn ingest_to(input: &Path, max_tokens: usize, out: &Path) -> Result<PassageStore> {
    let docs = read_documents(input)?;
    let store = ingest(&docs, max_tokens, &WhitespaceTokenizer)?;
    store.save(out)?;
    tracing::info!(documents = docs.len(), passages = store.len(), out = %out.display(), "ingested");
    Ok(store)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateDataArgs {
    pub client: String,
    pub n_gold: usize,
    pub hard_neg: usize,
    pub questions_per_passage: usize,
    /// Fractions of the generated pairs held out for validation and test.
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GenerateDataArgs {
    fn default() -> Self {
        GenerateDataArgs {
            client: "mock".into(),
            n_gold: 600,
            hard_neg: crate::datagen::DEFAULT_HARD_NEGATIVES,
            questions_per_passage: crate::datagen::DEFAULT_QUESTIONS_PER_PASSAGE,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Generates pairs and assigns every one a split, leak-free by gold passage.
/// `mock` uses the extractive offline writers for questions and answers.
pub fn generate_data(store: &PassageStore, args: &GenerateDataArgs) -> Result<Vec<QAPair>> {
    let (q_client, a_client) = match args.client.as_str() {
        "mock" => (client_by_name("mock-questions")?, client_by_name("mock-answers")?),
        name => (client_by_name(name)?, client_by_name(name)?),
    };
    let mut config = DatagenConfig::new(args.n_gold, args.seed);
    config.n_hard_neg = args.hard_neg;
    config.questions_per_passage = args.questions_per_passage;
    let pairs = generate_dataset(store, q_client.as_ref(), a_client.as_ref(), &config)?;
    let total = pairs.len();
    let n_val = (total as f64 * args.val_fraction).round() as usize;
    let n_test = (total as f64 * args.test_fraction).round() as usize;
    // Whole gold groups go to one split, so the train target may have to give
    // up a few pairs for validation and test to fill.
    let mut n_train = total.saturating_sub(n_val + n_test);
    loop {
        match split_dataset(&pairs, n_train, n_val, n_test, args.seed) {
            Ok(s) => return Ok(s.train.into_iter().chain(s.validation).chain(s.test).collect()),
            Err(RqaError::InsufficientData(_)) if n_train > 0 => n_train -= 1,
            Err(e) => return Err(e),
        }
    }
}

pub fn generate_data_to(passages: &Path, args: &GenerateDataArgs, out: &Path) -> Result<Vec<QAPair>> {
    let store = PassageStore::load(passages)?;
    let pairs = generate_data(&store, args)?;
    save_pairs(&pairs, out)?;
    tracing::info!(pairs = pairs.len(), out = %out.display(), "generated QA data");
    Ok(pairs)
}

/// Pairs of `split`; pairs without the field count as train.
pub fn load_split(path: &Path, split: Split) -> Result<Vec<QAPair>> {
    Ok(load_pairs(path)?.into_iter().filter(|p| p.split == split).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRetrieverArgs {
    pub config: RetrieverTrainConfig,
    pub dim: usize,
    /// Encoder-decoder checkpoint for DCA, decoder checkpoint for RPG.
    pub teacher: Option<PathBuf>,
}

/// Trains a fresh linear embedder on the train split and saves it with its
/// full configuration and loss curve summary.
pub fn train_retriever_to(data: &Path, passages: &Path, args: &TrainRetrieverArgs, out: &Path) -> Result<LinearEmbedder> {
    let store = PassageStore::load(passages)?;
    let train = load_split(data, Split::Train)?;
    let texts: Vec<&str> = store
        .iter()
        .map(|p| p.content.as_str())
        .chain(train.iter().map(|p| p.question.as_str()))
        .collect();
    let mut embedder = LinearEmbedder::for_texts(
        format!("{:?}", args.config.algorithm).to_lowercase(),
        texts,
        LinearEmbedderConfig {
            dim: args.dim,
            seed: args.config.seed,
            ..Default::default()
        },
    );
    let teacher_dir = || {
        args.teacher
            .as_deref()
            .ok_or_else(|| RqaError::Config(format!("{:?} needs --teacher", args.config.algorithm)))
    };
    let aux = match args.config.algorithm {
        RetrieverAlgorithm::Ctl => AuxModel::None,
        RetrieverAlgorithm::Dca => AuxModel::CrossAttention(Arc::new(TinyEncoderDecoder::load(teacher_dir()?)?)),
        RetrieverAlgorithm::Rpg => AuxModel::Likelihood(Arc::new(DecoderTeacher::new(
            Arc::new(TinyDecoder::load(teacher_dir()?)?),
            PromptAssembly::default(),
        )?)),
    };
    let log = train_retriever(&mut embedder, &train, &store, &args.config, &aux)?;
    embedder.save(
        out,
        Some(serde_json::json!({"args": args, "train_pairs": train.len(), "final_loss": log.last()})),
    )?;
    tracing::info!(final_loss = ?log.last(), out = %out.display(), "retriever trained");
    Ok(embedder)
}

/// Embeds every passage and writes the index file.
pub fn build_index_to(passages: &Path, embedder: &Path, out: &Path) -> Result<VectorIndex> {
    let store = PassageStore::load(passages)?;
    let model = crate::pipeline::load_embedder(&embedder.to_string_lossy())?;
    let index = VectorIndex::build(&store, model.as_ref())?;
    index.save(out)?;
    Ok(index)
}

/// Lays out a database directory: passages plus, for a dense embedder, its index.
pub fn build_database(passages: &Path, embedder: &str, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::copy(passages, dir.join(PASSAGES_FILE))?;
    if embedder != "bm25" {
        build_index_to(passages, Path::new(embedder), &dir.join(INDEX_FILE))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainGeneratorArgs {
    pub config: GeneratorTrainConfig,
    pub model: TransformerConfig,
    /// Embedder checkpoint or `bm25`; required by SwR and FiD.
    pub retriever: Option<String>,
}

pub fn train_generator_to(data: &Path, passages: &Path, args: &TrainGeneratorArgs, out: &Path) -> Result<LocalGenerator> {
    let store = PassageStore::load(passages)?;
    let train = load_split(data, Split::Train)?;
    let assembly = PromptAssembly::default();
    let template = assembly.template.text.clone();
    let texts: Vec<&str> = store
        .iter()
        .map(|p| p.content.as_str())
        .chain(train.iter().flat_map(|p| [p.question.as_str(), p.answer.as_str()]))
        .chain([template.as_str()])
        .collect();
    let name = format!("{:?}", args.config.algorithm).to_lowercase();
    let mut model = match args.config.algorithm {
        GeneratorAlgorithm::Fid => LocalGenerator::EncoderDecoder(TinyEncoderDecoder::for_texts(name, texts, args.model.clone())?),
        _ => LocalGenerator::Decoder(TinyDecoder::for_texts(name, texts, args.model.clone())?),
    };
    let retriever: Option<Arc<dyn Retriever>> = match &args.retriever {
        Some(spec) => {
            let dir = tempdir_for(out)?;
            std::fs::copy(passages, dir.join(PASSAGES_FILE))?;
            let (_, r, _) = load_retriever(&dir, spec)?;
            std::fs::remove_dir_all(&dir)?;
            Some(r)
        }
        None => None,
    };
    let log = train_generator(&mut model, &train, &store, &args.config, retriever.as_deref(), &assembly)?;
    let training = serde_json::json!({"args": args, "train_pairs": train.len(), "final_loss": log.last()});
    match &model {
        LocalGenerator::Decoder(m) => m.save(out, Some(training))?,
        LocalGenerator::EncoderDecoder(m) => m.save(out, Some(training))?,
    }
    tracing::info!(final_loss = ?log.last(), out = %out.display(), "generator trained");
    Ok(model)
}

fn tempdir_for(out: &Path) -> Result<PathBuf> {
    let dir = out.with_extension("retriever-db.tmp");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes a `simple_rqa` manifest whose paths are relative to the manifest's directory when possible.
pub fn write_simple_manifest(path: &Path, config: &SimpleRqaConfig) -> Result<PipelineManifest> {
    let manifest = PipelineManifest::simple(config)?;
    manifest.save(path)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    pub k: usize,
    /// `none`, `mock` or `remote`.
    pub judge: String,
}

impl Default for EvalArgs {
    fn default() -> Self {
        EvalArgs {
            k: 4,
            judge: "none".into(),
        }
    }
}

/// Evaluates the manifest's pipeline on the test split of `test`.
pub fn eval_to(manifest: &Path, test: &Path, passages: &Path, args: &EvalArgs, out: &Path) -> Result<EvalSummary> {
    let pipeline = PipelineManifest::load(manifest)?.build(manifest.parent().unwrap_or(Path::new(".")))?;
    let all = load_pairs(test)?;
    let test_pairs: Vec<QAPair> = if all.iter().any(|p| p.split == Split::Test) {
        all.into_iter().filter(|p| p.split == Split::Test).collect()
    } else {
        all
    };
    let store = PassageStore::load(passages)?;
    let judge = match args.judge.as_str() {
        "none" => None,
        "mock" => Some(client_by_name("mock-judge")?),
        other => Some(client_by_name(other)?),
    };
    let options = EvalOptions {
        k: args.k,
        judge: judge.as_deref().map(|j| (j, PromptTemplate::judge())),
    };
    let summary = evaluate_pipeline(&pipeline, &test_pairs, &store, &options, out)?;
    tracing::info!(items = summary.n_items, failures = summary.failures, out = %out.display(), "evaluated");
    Ok(summary)
}

/// Loads a generator just to report its identity.
pub fn generator_identity(spec: &str) -> Result<String> {
    Ok(load_generator(spec)?.identity())
}
