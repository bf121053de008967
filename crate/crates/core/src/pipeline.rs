//! Composable RQA pipelines: components read declared keys from a shared
//! state map and merge their outputs back into it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, PassageStore};
use crate::error::{Result, RqaError};
use crate::generation::{BackendKind, FidInput, GenerationInput, GeneratorBackend, LlmBackend, PromptAssembly};
use crate::llm::{client_by_name, SamplingParams};
use crate::nn::checkpoint::read_manifest;
use crate::nn::decoder::TINY_DECODER_KIND;
use crate::nn::embedder::LINEAR_EMBEDDER_KIND;
use crate::nn::seq2seq::TINY_ENCODER_DECODER_KIND;
use crate::nn::{LinearEmbedder, TinyDecoder, TinyEncoderDecoder};
use crate::retrieval::{Bm25Index, DenseRetriever, Embedder, Retriever, VectorIndex};
use crate::session::{DialogueSession, Role};

pub const BATCH_QUESTIONS: &str = "batch_questions";
pub const BATCH_DIALOGUE_SESSION: &str = "batch_dialogue_session";
pub const BATCH_SOURCE_DOCUMENTS: &str = "batch_source_documents";
pub const BATCH_ANSWERS: &str = "batch_answers";

pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const INDEX_FILE: &str = "index.rqaidx";
pub const DEFAULT_K: usize = 4;
pub const DONT_KNOW: &str = "I don't know.";

/// A value in the pipeline state.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Questions(Vec<String>),
    Sessions(Vec<DialogueSession>),
    Documents(Vec<Vec<Passage>>),
    Answers(Vec<String>),
    Json(serde_json::Value),
}

pub type State = BTreeMap<String, Value>;

fn expect<'a, T>(state: &'a State, key: &str, pick: impl Fn(&'a Value) -> Option<&'a T>) -> Result<&'a T> {
    let value = state.get(key).ok_or_else(|| RqaError::MissingKey {
        component: "<runner>".into(),
        key: key.into(),
    })?;
    pick(value).ok_or_else(|| RqaError::schema(key, "value has the wrong type"))
}

pub fn questions(state: &State) -> Result<&Vec<String>> {
    expect(state, BATCH_QUESTIONS, |v| match v {
        Value::Questions(q) => Some(q),
        _ => None,
    })
}

pub fn sessions(state: &State) -> Result<&Vec<DialogueSession>> {
    expect(state, BATCH_DIALOGUE_SESSION, |v| match v {
        Value::Sessions(s) => Some(s),
        _ => None,
    })
}

pub fn documents(state: &State) -> Result<&Vec<Vec<Passage>>> {
    expect(state, BATCH_SOURCE_DOCUMENTS, |v| match v {
        Value::Documents(d) => Some(d),
        _ => None,
    })
}

pub fn answers(state: &State) -> Result<&Vec<String>> {
    expect(state, BATCH_ANSWERS, |v| match v {
        Value::Answers(a) => Some(a),
        _ => None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComponentKind {
    Retriever,
    Generator,
    Other,
}

pub trait Component: Send + Sync {
    fn name(&self) -> String;

    /// The only state keys `run` will receive.
    fn run_input_keys(&self) -> Vec<String>;

    fn run(&self, inputs: &State) -> Result<State>;

    fn kind(&self) -> ComponentKind {
        ComponentKind::Other
    }

    /// Describes the component's configuration and weights.
    fn identity(&self) -> String {
        self.name()
    }

    /// How many `run` calls may safely overlap.
    fn max_concurrency(&self) -> usize {
        usize::MAX
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RQAOutput {
    pub batch_answers: Vec<String>,
    pub batch_source_documents: Vec<Vec<Passage>>,
    pub batch_dialogue_session: Vec<DialogueSession>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentTiming {
    pub name: String,
    pub kind: ComponentKind,
    pub elapsed: Duration,
}

#[derive(Clone, Default)]
pub struct RQAPipeline {
    pub components: Vec<Arc<dyn Component>>,
}

impl RQAPipeline {
    pub fn new(components: Vec<Arc<dyn Component>>) -> Self {
        RQAPipeline { components }
    }

    pub fn identity(&self) -> String {
        self.components
            .iter()
            .map(|c| c.identity())
            .collect::<Vec<_>>()
            .join(" | ")
    }

    /// The smallest concurrency hint among the components, at least 1.
    pub fn max_concurrency(&self) -> usize {
        self.components.iter().map(|c| c.max_concurrency()).min().unwrap_or(1).clamp(1, 1024)
    }

    pub fn qa(&self, batch_questions: Vec<String>, batch_dialogue_session: Vec<DialogueSession>) -> Result<RQAOutput> {
        self.qa_timed(batch_questions, batch_dialogue_session).map(|(out, _)| out)
    }

    /// Runs every component in order and records how long each took.
    pub fn qa_timed(
        &self,
        batch_questions: Vec<String>,
        batch_dialogue_session: Vec<DialogueSession>,
    ) -> Result<(RQAOutput, Vec<ComponentTiming>)> {
        if self.components.is_empty() {
            return Err(RqaError::Config("pipeline has no components".into()));
        }
        if batch_questions.len() != batch_dialogue_session.len() {
            return Err(RqaError::Precondition(format!(
                "{} questions but {} sessions",
                batch_questions.len(),
                batch_dialogue_session.len()
            )));
        }
        let mut state = State::new();
        state.insert(BATCH_QUESTIONS.into(), Value::Questions(batch_questions));
        state.insert(BATCH_DIALOGUE_SESSION.into(), Value::Sessions(batch_dialogue_session));

        let mut timings = Vec::with_capacity(self.components.len());
        for (index, component) in self.components.iter().enumerate() {
            let mut inputs = State::new();
            for key in component.run_input_keys() {
                let value = state.get(&key).ok_or_else(|| RqaError::MissingKey {
                    component: component.name(),
                    key: key.clone(),
                })?;
                inputs.insert(key, value.clone());
            }
            let start = Instant::now();
            let outputs = component.run(&inputs).map_err(|e| RqaError::Pipeline {
                index,
                component: component.name(),
                source: Box::new(e),
            })?;
            timings.push(ComponentTiming {
                name: component.name(),
                kind: component.kind(),
                elapsed: start.elapsed(),
            });
            state.extend(outputs);
        }

        let questions = questions(&state)?.clone();
        let answers = answers(&state)?.clone();
        let docs = documents(&state).cloned().unwrap_or_else(|_| vec![Vec::new(); questions.len()]);
        let mut sessions = sessions(&state)?.clone();
        if answers.len() != questions.len() || docs.len() != questions.len() || sessions.len() != questions.len() {
            return Err(RqaError::Shape("pipeline outputs do not match the batch size".into()));
        }
        for ((session, q), a) in sessions.iter_mut().zip(&questions).zip(&answers) {
            session.push(Role::User, q.clone())?;
            session.push(Role::Assistant, a.clone())?;
        }
        Ok((
            RQAOutput {
                batch_answers: answers,
                batch_source_documents: docs,
                batch_dialogue_session: sessions,
            },
            timings,
        ))
    }
}

/// Retrieves the top `k` passages for each question (the latest user turn only).
pub struct RetrieverComponent {
    retriever: Arc<dyn Retriever>,
    store: Arc<PassageStore>,
    k: usize,
    identity: String,
}

impl RetrieverComponent {
    pub fn new(retriever: Arc<dyn Retriever>, store: Arc<PassageStore>, k: usize, identity: impl Into<String>) -> Self {
        RetrieverComponent {
            retriever,
            store,
            k,
            identity: identity.into(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl Component for RetrieverComponent {
    fn name(&self) -> String {
        "retriever".into()
    }

    fn run_input_keys(&self) -> Vec<String> {
        vec![BATCH_QUESTIONS.into()]
    }

    fn run(&self, inputs: &State) -> Result<State> {
        let docs = questions(inputs)?
            .iter()
            .map(|q| {
                self.retriever
                    .retrieve(q, self.k)?
                    .hits
                    .iter()
                    .map(|h| {
                        self.store.get(&h.passage_id).cloned().ok_or_else(|| {
                            RqaError::Precondition(format!("index returned unknown passage {}", h.passage_id))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(State::from([(BATCH_SOURCE_DOCUMENTS.into(), Value::Documents(docs))]))
    }

    fn kind(&self) -> ComponentKind {
        ComponentKind::Retriever
    }

    fn identity(&self) -> String {
        format!("retriever({}, k={})", self.identity, self.k)
    }
}

/// Writes an answer from the question, its passages and the dialogue history.
/// Encoder-decoder backends receive the passages as fusion-in-decoder input.
pub struct GeneratorComponent {
    backend: Arc<dyn GeneratorBackend>,
    assembly: PromptAssembly,
    sampling: SamplingParams,
}

impl GeneratorComponent {
    pub fn new(backend: Arc<dyn GeneratorBackend>, assembly: PromptAssembly, sampling: SamplingParams) -> Self {
        GeneratorComponent {
            backend,
            assembly,
            sampling,
        }
    }

    pub fn backend(&self) -> &Arc<dyn GeneratorBackend> {
        &self.backend
    }
}

impl Component for GeneratorComponent {
    fn name(&self) -> String {
        "generator".into()
    }

    fn run_input_keys(&self) -> Vec<String> {
        vec![BATCH_QUESTIONS.into(), BATCH_SOURCE_DOCUMENTS.into(), BATCH_DIALOGUE_SESSION.into()]
    }

    fn run(&self, inputs: &State) -> Result<State> {
        let qs = questions(inputs)?;
        let docs = documents(inputs)?;
        let sessions = sessions(inputs)?;
        let mut answers = Vec::with_capacity(qs.len());
        for ((q, passages), session) in qs.iter().zip(docs).zip(sessions) {
            let refs: Vec<&Passage> = passages.iter().collect();
            let answer = if self.backend.kind() == BackendKind::EncoderDecoder && !refs.is_empty() {
                let input = FidInput::new(q.clone(), &refs);
                self.backend.generate(GenerationInput::Fid(&input), &self.sampling)?
            } else {
                let prompt = self.assembly.assemble(q, &refs, session)?;
                self.backend.generate(GenerationInput::Prompt(&prompt), &self.sampling)?
            };
            answers.push(answer.trim().to_string());
        }
        Ok(State::from([(BATCH_ANSWERS.into(), Value::Answers(answers))]))
    }

    fn kind(&self) -> ComponentKind {
        ComponentKind::Generator
    }

    fn identity(&self) -> String {
        format!("generator({})", self.backend.identity())
    }

    fn max_concurrency(&self) -> usize {
        self.backend.max_concurrency()
    }
}

/// Replaces every answer with "I don't know.", leaving sources untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct DontKnowSafetyFilter;

impl Component for DontKnowSafetyFilter {
    fn name(&self) -> String {
        "dont_know_filter".into()
    }

    fn run_input_keys(&self) -> Vec<String> {
        vec![BATCH_QUESTIONS.into()]
    }

    fn run(&self, inputs: &State) -> Result<State> {
        let n = questions(inputs)?.len();
        Ok(State::from([(BATCH_ANSWERS.into(), Value::Answers(vec![DONT_KNOW.into(); n]))]))
    }
}

/// Loads an embedder from a checkpoint directory.
pub fn load_embedder(spec: &str) -> Result<Arc<dyn Embedder>> {
    let dir = Path::new(spec);
    let manifest = read_manifest(dir)?;
    match manifest.kind.as_str() {
        LINEAR_EMBEDDER_KIND => Ok(Arc::new(LinearEmbedder::load(dir)?)),
        other => Err(RqaError::Config(format!("`{spec}` holds a {other}, not an embedder"))),
    }
}

/// Resolves `mock`, `remote`, any other LLM client name, or a checkpoint directory.
pub fn load_generator(spec: &str) -> Result<Arc<dyn GeneratorBackend>> {
    let dir = Path::new(spec);
    if !dir.join(crate::nn::checkpoint::MANIFEST_FILE).exists() {
        let client = match spec {
            "mock" => client_by_name("mock-answers")?,
            other => client_by_name(other)
                .map_err(|_| RqaError::Config(format!("`{spec}` is neither a generator name nor a checkpoint")))?,
        };
        return Ok(Arc::new(LlmBackend::new(Arc::from(client))));
    }
    let manifest = read_manifest(dir)?;
    match manifest.kind.as_str() {
        TINY_DECODER_KIND => Ok(Arc::new(TinyDecoder::load(dir)?)),
        TINY_ENCODER_DECODER_KIND => Ok(Arc::new(TinyEncoderDecoder::load(dir)?)),
        other => Err(RqaError::Config(format!("`{spec}` holds a {other}, not a generator"))),
    }
}

/// Builds a retriever over the database at `database_path`: BM25 when
/// `embedder` is `bm25`, otherwise the stored dense index searched with the
/// embedder checkpoint (the index is built on the fly if absent).
pub fn load_retriever(database_path: &Path, embedder: &str) -> Result<(Arc<PassageStore>, Arc<dyn Retriever>, String)> {
    let store = Arc::new(PassageStore::load(&database_path.join(PASSAGES_FILE))?);
    if embedder == "bm25" {
        return Ok((store.clone(), Arc::new(Bm25Index::build(&store)?), "bm25".into()));
    }
    let model = load_embedder(embedder)?;
    let index_path = database_path.join(INDEX_FILE);
    let index = if index_path.exists() {
        VectorIndex::load(&index_path)?
    } else {
        VectorIndex::build(&store, model.as_ref())?
    };
    let identity = model.identity();
    let retriever = DenseRetriever::new(Arc::new(index), model)?;
    Ok((store, Arc::new(retriever), identity))
}

/// Settings of a [`SimpleRQA`] pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimpleRqaConfig {
    pub database_path: PathBuf,
    /// `bm25` or an embedder checkpoint directory.
    pub embedder: String,
    /// `mock`, `remote`, or a generator checkpoint directory.
    pub generator: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_budget")]
    pub budget_tokens: usize,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_budget() -> usize {
    crate::generation::DEFAULT_PROMPT_BUDGET
}

fn default_max_new_tokens() -> usize {
    64
}

/// Retriever followed by generator.
pub struct SimpleRQA;

impl SimpleRQA {
    pub fn from_scratch(database_path: &Path, embedder: &str, generator: &str, k: usize) -> Result<RQAPipeline> {
        SimpleRQA::from_config(&SimpleRqaConfig {
            database_path: database_path.to_path_buf(),
            embedder: embedder.into(),
            generator: generator.into(),
            k,
            budget_tokens: default_budget(),
            max_new_tokens: default_max_new_tokens(),
        })
    }

    pub fn from_config(config: &SimpleRqaConfig) -> Result<RQAPipeline> {
        let (store, retriever, identity) = load_retriever(&config.database_path, &config.embedder)?;
        let backend = load_generator(&config.generator)?;
        Ok(SimpleRQA::from_parts(
            retriever,
            store,
            identity,
            config.k,
            backend,
            PromptAssembly::with_budget(config.budget_tokens),
            SamplingParams::greedy(config.max_new_tokens),
        ))
    }

    pub fn from_parts(
        retriever: Arc<dyn Retriever>,
        store: Arc<PassageStore>,
        retriever_identity: impl Into<String>,
        k: usize,
        backend: Arc<dyn GeneratorBackend>,
        assembly: PromptAssembly,
        sampling: SamplingParams,
    ) -> RQAPipeline {
        RQAPipeline::new(vec![
            Arc::new(RetrieverComponent::new(retriever, store, k, retriever_identity)),
            Arc::new(GeneratorComponent::new(backend, assembly, sampling)),
        ])
    }
}

/// One entry of a pipeline manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Ordered component list consumed by evaluation and serving.
///
/// Supported component types: `simple_rqa` (retriever + generator, see
/// [`SimpleRqaConfig`]) and `dont_know_filter`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub components: Vec<ComponentSpec>,
}

impl PipelineManifest {
    pub fn simple(config: &SimpleRqaConfig) -> Result<Self> {
        Ok(PipelineManifest {
            components: vec![ComponentSpec {
                kind: "simple_rqa".into(),
                config: serde_json::to_value(config)?,
            }],
        })
    }

    pub fn with(mut self, kind: &str) -> Self {
        self.components.push(ComponentSpec {
            kind: kind.into(),
            config: serde_json::Value::Null,
        });
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RqaError::Config(format!("cannot read pipeline manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| RqaError::Load {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Instantiates the pipeline; relative paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<RQAPipeline> {
        let resolve = |p: &str| -> String {
            let path = Path::new(p);
            if path.is_relative() && base_dir.join(path).exists() {
                base_dir.join(path).to_string_lossy().into_owned()
            } else {
                p.to_string()
            }
        };
        let mut pipeline = RQAPipeline::default();
        for spec in &self.components {
            match spec.kind.as_str() {
                "simple_rqa" => {
                    let mut cfg: SimpleRqaConfig = serde_json::from_value(spec.config.clone())
                        .map_err(|e| RqaError::Config(format!("simple_rqa config: {e}")))?;
                    cfg.database_path = PathBuf::from(resolve(&cfg.database_path.to_string_lossy()));
                    cfg.embedder = resolve(&cfg.embedder);
                    cfg.generator = resolve(&cfg.generator);
                    pipeline.components.extend(SimpleRQA::from_config(&cfg)?.components);
                }
                "dont_know_filter" => pipeline.components.push(Arc::new(DontKnowSafetyFilter)),
                other => return Err(RqaError::Config(format!("unknown component type `{other}`"))),
            }
        }
        Ok(pipeline)
    }
}
