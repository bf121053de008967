//! Text-in/text-out language model clients used for data generation, remote
//! answer generation and judging.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RqaError};

pub const ENDPOINT_ENV: &str = "RQA_LLM_ENDPOINT";
pub const KEY_ENV: &str = "RQA_LLM_KEY";
pub const MODEL_ENV: &str = "RQA_LLM_MODEL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        SamplingParams {
            max_new_tokens,
            ..Default::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplingParams {
            seed,
            ..self.clone()
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn identity(&self) -> &str;

    fn generate(&self, prompt: &str, sampling: &SamplingParams) -> Result<String>;
}

impl<T: LlmClient + ?Sized> LlmClient for std::sync::Arc<T> {
    fn identity(&self) -> &str {
        (**self).identity()
    }

    fn generate(&self, prompt: &str, sampling: &SamplingParams) -> Result<String> {
        (**self).generate(prompt, sampling)
    }
}

/// A prompt with `{name}` slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        PromptTemplate { text: text.into() }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(PromptTemplate::new(std::fs::read_to_string(path)?))
    }

    /// Substitutes every `{key}` slot. Unknown slots are left untouched.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = self.text.clone();
        for (key, value) in values {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        out
    }

    pub fn question_generation() -> Self {
        PromptTemplate::new(include_str!("../templates/question_generation.txt"))
    }

    pub fn answer_generation() -> Self {
        PromptTemplate::new(include_str!("../templates/answer_generation.txt"))
    }

    pub fn judge() -> Self {
        PromptTemplate::new(include_str!("../templates/judge.txt"))
    }
}

fn hash_seed(prompt: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Text between the first pair of `"""` fences, or the whole prompt.
fn fenced_block(prompt: &str) -> &str {
    let mut parts = prompt.splitn(3, "\"\"\"");
    match (parts.next(), parts.next(), parts.next()) {
        (Some(_), Some(inner), Some(_)) => inner,
        _ => prompt,
    }
}

#[derive(Clone, Debug)]
pub enum MockMode {
    /// `mock-<16 hex chars>` derived from the prompt and seed.
    Hashed,
    /// A contiguous run of words copied from the first `"""`-fenced block of
    /// the prompt; position and length are derived from the prompt hash.
    Extractive {
        min_words: usize,
        max_words: usize,
        suffix: String,
    },
    /// Replays the given responses in order, cycling.
    Scripted(Vec<String>),
    /// Returns the prompt unchanged.
    Echo,
    /// Reads the `Reference answer:` and `System answer:` lines of a judge
    /// prompt and answers `VERDICT: CORRECT` when their ROUGE-L F1 reaches
    /// the threshold.
    Judge { threshold: f64 },
}

/// Deterministic offline client. Output depends only on the prompt, the
/// sampling seed and (for scripted mode) the call count.
#[derive(Debug)]
pub struct MockLlmClient {
    identity: String,
    mode: MockMode,
    calls: AtomicUsize,
}

impl MockLlmClient {
    pub fn new(mode: MockMode) -> Self {
        MockLlmClient {
            identity: "mock".to_string(),
            mode,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn hashed() -> Self {
        MockLlmClient::new(MockMode::Hashed)
    }

    pub fn extractive(min_words: usize, max_words: usize, suffix: &str) -> Self {
        MockLlmClient::new(MockMode::Extractive {
            min_words,
            max_words,
            suffix: suffix.to_string(),
        })
    }

    /// Questions as extracted word spans ending in `?`.
    pub fn question_writer() -> Self {
        MockLlmClient::extractive(4, 8, "?").named("mock-questions")
    }

    /// Answers as extracted word spans.
    pub fn answer_writer() -> Self {
        MockLlmClient::extractive(3, 8, "").named("mock-answers")
    }

    pub fn judge() -> Self {
        MockLlmClient::new(MockMode::Judge { threshold: 0.5 }).named("mock-judge")
    }

    pub fn scripted<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        MockLlmClient::new(MockMode::Scripted(
            responses.into_iter().map(Into::into).collect(),
        ))
    }

    pub fn named(mut self, identity: &str) -> Self {
        self.identity = identity.to_string();
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for MockLlmClient {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn generate(&self, prompt: &str, sampling: &SamplingParams) -> Result<String> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let seed = hash_seed(prompt, sampling.seed);
        Ok(match &self.mode {
            MockMode::Hashed => format!("mock-{seed:016x}"),
            MockMode::Echo => prompt.to_string(),
            MockMode::Judge { threshold } => {
                let field = |name: &str| {
                    prompt
                        .lines()
                        .find_map(|l| l.strip_prefix(name))
                        .map(str::trim)
                        .unwrap_or("")
                };
                let score = crate::evaluation::metrics::rouge_l(field("System answer:"), field("Reference answer:"));
                let verdict = if score >= *threshold { "CORRECT" } else { "INCORRECT" };
                format!("ROUGE-L overlap is {score:.2}.\nVERDICT: {verdict}")
            }
            MockMode::Scripted(responses) => {
                if responses.is_empty() {
                    String::new()
                } else {
                    responses[call % responses.len()].clone()
                }
            }
            MockMode::Extractive {
                min_words,
                max_words,
                suffix,
            } => {
                let words: Vec<&str> = fenced_block(prompt).split_whitespace().collect();
                if words.is_empty() {
                    return Ok(String::new());
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let len = rng
                    .random_range(*min_words..=(*max_words).max(*min_words))
                    .min(words.len());
                let start = rng.random_range(0..=words.len() - len);
                let mut text = words[start..start + len].join(" ");
                text = text
                    .trim_end_matches(|c: char| c.is_ascii_punctuation())
                    .to_string();
                text.push_str(suffix);
                text
            }
        })
    }
}

/// OpenAI-compatible chat-completions client configured from the environment.
pub struct RemoteLlmClient {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    timeout: Duration,
    client: OnceLock<reqwest::blocking::Client>,
}

impl RemoteLlmClient {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        RemoteLlmClient {
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            timeout: Duration::from_secs(120),
            client: OnceLock::new(),
        }
    }

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| RqaError::Config(format!("{ENDPOINT_ENV} is not set")))?;
        let key = std::env::var(KEY_ENV).ok();
        let model = std::env::var(MODEL_ENV).unwrap_or_else(|_| "gpt-3.5-turbo".to_string());
        Ok(RemoteLlmClient::new(endpoint, key, model))
    }
}

impl LlmClient for RemoteLlmClient {
    fn identity(&self) -> &str {
        &self.model
    }

    fn generate(&self, prompt: &str, sampling: &SamplingParams) -> Result<String> {
        let client = self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .expect("failed to build HTTP client")
        });
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": sampling.max_new_tokens,
            "seed": sampling.seed,
        });
        let mut req = client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| RqaError::backend(None, format!("request to {} failed: {e}", self.endpoint)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RqaError::backend(
                None,
                format!("{} returned {status}", self.endpoint),
            ));
        }
        let json: serde_json::Value = resp
            .json()
            .map_err(|e| RqaError::backend(None, format!("invalid response body: {e}")))?;
        json.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| RqaError::backend(None, "response has no choices[0].message.content"))
    }
}

/// Resolves a client by name: `mock`, `mock-questions`, `mock-answers`,
/// `mock-judge`, `echo`, or `remote` (environment-configured).
pub fn client_by_name(name: &str) -> Result<Box<dyn LlmClient>> {
    Ok(match name {
        "mock" => Box::new(MockLlmClient::hashed()),
        "mock-questions" => Box::new(MockLlmClient::question_writer()),
        "mock-answers" => Box::new(MockLlmClient::answer_writer()),
        "mock-judge" => Box::new(MockLlmClient::judge()),
        "echo" => Box::new(MockLlmClient::new(MockMode::Echo).named("echo")),
        "remote" => Box::new(RemoteLlmClient::from_env()?),
        other => return Err(RqaError::Config(format!("unknown LLM client `{other}`"))),
    })
}
