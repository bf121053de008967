//! Answer generation: prompt assembly, the generator backend interface and
//! its local and remote implementations.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Passage;
use crate::error::{Result, RqaError};
use crate::llm::{LlmClient, PromptTemplate, SamplingParams};
use crate::nn::{TinyDecoder, TinyEncoderDecoder};
use crate::session::DialogueSession;
use crate::tokenizer::{Tokenizer, WhitespaceTokenizer};

pub const DEFAULT_PROMPT_BUDGET: usize = 1024;

/// How a question, retrieved passages and dialogue history become one prompt.
#[derive(Clone)]
pub struct PromptAssembly {
    /// Template with `{passages}`, `{history}` and `{question}` slots.
    pub template: PromptTemplate,
    pub passage_separator: String,
    /// Maximum prompt length in tokens of `tokenizer`.
    pub budget_tokens: usize,
    pub tokenizer: Arc<dyn Tokenizer>,
}

impl Default for PromptAssembly {
    fn default() -> Self {
        PromptAssembly {
            template: PromptTemplate::new(include_str!("../templates/rqa_prompt.txt")),
            passage_separator: "\n\n".into(),
            budget_tokens: DEFAULT_PROMPT_BUDGET,
            tokenizer: Arc::new(WhitespaceTokenizer),
        }
    }
}

impl std::fmt::Debug for PromptAssembly {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptAssembly")
            .field("template", &self.template)
            .field("passage_separator", &self.passage_separator)
            .field("budget_tokens", &self.budget_tokens)
            .field("tokenizer", &self.tokenizer.id())
            .finish()
    }
}

impl PromptAssembly {
    pub fn with_budget(budget_tokens: usize) -> Self {
        PromptAssembly {
            budget_tokens,
            ..Default::default()
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    fn render(&self, question: &str, passages: &[&str], exchanges: &[(&str, &str)]) -> String {
        let passages = passages.join(&self.passage_separator);
        let history: String = exchanges
            .iter()
            .map(|(u, a)| format!("User: {u}\nAssistant: {a}\n"))
            .collect();
        self.template.render(&[
            ("passages", &passages),
            ("history", &history),
            ("question", question),
        ])
    }

    /// Fills the template, dropping whole passages from the end of the list
    /// and then the oldest exchanges until the prompt fits the budget.
    pub fn assemble(&self, question: &str, passages: &[&Passage], session: &DialogueSession) -> Result<String> {
        let texts: Vec<&str> = passages.iter().map(|p| p.content.as_str()).collect();
        self.assemble_texts(question, &texts, session)
    }

    pub fn assemble_texts(&self, question: &str, passages: &[&str], session: &DialogueSession) -> Result<String> {
        let exchanges = session.exchanges();
        let mut n_passages = passages.len();
        let mut first_exchange = 0;
        loop {
            let prompt = self.render(question, &passages[..n_passages], &exchanges[first_exchange..]);
            let used = self.tokenizer.count(&prompt);
            if used <= self.budget_tokens {
                return Ok(prompt);
            }
            if n_passages > 0 {
                n_passages -= 1;
            } else if first_exchange < exchanges.len() {
                first_exchange += 1;
            } else {
                return Err(RqaError::Budget {
                    budget: self.budget_tokens,
                    required: used,
                });
            }
        }
    }
}

/// Inputs for fusion-in-decoder generation: one encoder input per passage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidInput {
    pub question: String,
    pub passages: Vec<String>,
}

impl FidInput {
    pub fn new(question: impl Into<String>, passages: &[&Passage]) -> Self {
        FidInput {
            question: question.into(),
            passages: passages.iter().map(|p| p.content.clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum GenerationInput<'a> {
    Prompt(&'a str),
    Fid(&'a FidInput),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Decoder,
    EncoderDecoder,
    Remote,
}

pub trait GeneratorBackend: Send + Sync {
    fn identity(&self) -> String;

    fn kind(&self) -> BackendKind;

    fn generate(&self, input: GenerationInput<'_>, sampling: &SamplingParams) -> Result<String>;

    /// Sum of the continuation tokens' log-probabilities given the context.
    fn loglikelihood(&self, context: &str, continuation: &str) -> Result<f64>;

    /// How many `generate` calls may run at once.
    fn max_concurrency(&self) -> usize {
        1
    }
}

fn local_concurrency() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl GeneratorBackend for TinyDecoder {
    fn identity(&self) -> String {
        TinyDecoder::identity(self).to_string()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Decoder
    }

    fn generate(&self, input: GenerationInput<'_>, sampling: &SamplingParams) -> Result<String> {
        match input {
            GenerationInput::Prompt(prompt) => self.generate_text(prompt, sampling),
            GenerationInput::Fid(_) => Err(RqaError::Config(
                "a decoder-only backend cannot take fusion-in-decoder input".into(),
            )),
        }
    }

    fn loglikelihood(&self, context: &str, continuation: &str) -> Result<f64> {
        TinyDecoder::loglikelihood(self, context, continuation)
    }

    fn max_concurrency(&self) -> usize {
        local_concurrency()
    }
}

impl TinyEncoderDecoder {
    pub fn fid_inputs(&self, input: &FidInput) -> Result<Vec<Vec<usize>>> {
        if input.passages.is_empty() {
            return Err(RqaError::Precondition("fusion-in-decoder needs at least one passage".into()));
        }
        Ok(input
            .passages
            .iter()
            .map(|p| self.fid_input_ids(&input.question, p))
            .collect())
    }

    fn prompt_input(&self, prompt: &str) -> Vec<usize> {
        let mut ids = self.encode(prompt);
        let keep = ids.len().min(self.config().max_positions);
        ids.drain(..ids.len() - keep);
        if ids.is_empty() {
            ids.push(crate::nn::vocab::UNK);
        }
        ids
    }
}

impl GeneratorBackend for TinyEncoderDecoder {
    fn identity(&self) -> String {
        TinyEncoderDecoder::identity(self).to_string()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::EncoderDecoder
    }

    fn generate(&self, input: GenerationInput<'_>, sampling: &SamplingParams) -> Result<String> {
        let inputs = match input {
            GenerationInput::Prompt(prompt) => vec![self.prompt_input(prompt)],
            GenerationInput::Fid(fid) => self.fid_inputs(fid)?,
        };
        let ids = self.generate_ids(&inputs, sampling)?;
        Ok(self.vocab().decode(&ids))
    }

    fn loglikelihood(&self, context: &str, continuation: &str) -> Result<f64> {
        self.loglikelihood_ids(&[self.prompt_input(context)], &self.encode(continuation))
    }

    fn max_concurrency(&self) -> usize {
        local_concurrency()
    }
}

#[derive(Clone, Debug)]
pub struct RetryPolicy {
    pub attempts: usize,
    /// Delay before the first retry; doubled before each further retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

/// Calls `client`, retrying failures with exponential backoff.
pub fn remote_generate(
    client: &dyn LlmClient,
    prompt: &str,
    sampling: &SamplingParams,
    policy: &RetryPolicy,
) -> Result<String> {
    let attempts = policy.attempts.max(1);
    let mut delay = policy.base_delay;
    let mut last = None;
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match client.generate(prompt, sampling) {
            Ok(text) => return Ok(text),
            Err(e) => {
                tracing::warn!(client = client.identity(), attempt, error = %e, "generation failed");
                last = Some(e);
            }
        }
    }
    let cause = last.expect("at least one attempt");
    Err(RqaError::backend(
        Some(format!("{} after {attempts} attempts", client.identity())),
        match cause {
            RqaError::GenerationBackend { message, .. } => message,
            other => other.to_string(),
        },
    ))
}

/// A text-only LLM client used as a generator.
#[derive(Clone)]
pub struct LlmBackend {
    client: Arc<dyn LlmClient>,
    policy: RetryPolicy,
}

impl LlmBackend {
    pub fn new(client: Arc<dyn LlmClient>) -> Self {
        LlmBackend {
            client,
            policy: RetryPolicy::default(),
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }
}

impl GeneratorBackend for LlmBackend {
    fn identity(&self) -> String {
        self.client.identity().to_string()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn generate(&self, input: GenerationInput<'_>, sampling: &SamplingParams) -> Result<String> {
        match input {
            GenerationInput::Prompt(prompt) => remote_generate(self.client.as_ref(), prompt, sampling, &self.policy),
            GenerationInput::Fid(_) => Err(RqaError::Config(
                "a remote backend cannot take fusion-in-decoder input".into(),
            )),
        }
    }

    fn loglikelihood(&self, _: &str, _: &str) -> Result<f64> {
        Err(RqaError::Config("remote backends do not expose log-likelihoods".into()))
    }

    fn max_concurrency(&self) -> usize {
        8
    }
}

/// Generates with an encoder-decoder over one encoder pass per passage.
pub fn fid_generate(backend: &dyn GeneratorBackend, input: &FidInput, sampling: &SamplingParams) -> Result<String> {
    if backend.kind() != BackendKind::EncoderDecoder {
        return Err(RqaError::Config(format!(
            "fusion-in-decoder needs an encoder-decoder backend, `{}` is {:?}",
            backend.identity(),
            backend.kind()
        )));
    }
    backend.generate(GenerationInput::Fid(input), sampling)
}

/// `log P(answer | prompt(question, passage))` under `backend`.
pub fn answer_loglikelihood(
    backend: &dyn GeneratorBackend,
    question: &str,
    passage: &Passage,
    answer: &str,
    assembly: &PromptAssembly,
) -> Result<f64> {
    if answer.split_whitespace().next().is_none() {
        return Err(RqaError::EmptyContinuation);
    }
    let prompt = assembly.assemble(question, &[passage], &DialogueSession::default())?;
    backend.loglikelihood(&prompt, answer)
}
