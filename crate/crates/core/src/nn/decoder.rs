use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Manifest};
use super::graph::{Bound, Graph, Var};
use super::matrix::{log_softmax, Matrix};
use super::params::ParamSet;
use super::transformer::{
    attention, causal_mask, ffn, init_attention, init_ffn, positions, residual, sample_token, TransformerConfig,
};
use super::vocab::{word_tokens, Vocab, BOS, EOS};
use crate::error::{Result, RqaError};
use crate::llm::SamplingParams;

pub const TINY_DECODER_KIND: &str = "tiny-decoder";

/// A small causal transformer language model over whitespace tokens.
///
/// Sequences are laid out as `<bos> context continuation <eos>`; there is no
/// separator between context and continuation, so log-likelihoods obey the
/// chain rule exactly.
#[derive(Clone, Debug)]
pub struct TinyDecoder {
    name: String,
    config: TransformerConfig,
    vocab: Vocab,
    params: ParamSet,
    identity: String,
}

impl TinyDecoder {
    pub fn new(name: impl Into<String>, vocab: Vocab, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d) = (vocab.len(), config.d_model);
        let mut p = ParamSet::new();
        p.insert("tok", Matrix::random_normal(v, d, 1.0, &mut rng));
        p.insert("pos", Matrix::random_normal(config.max_positions, d, 0.1, &mut rng));
        for l in 0..config.n_layers {
            init_attention(&mut p, &format!("l{l}.attn"), d, &mut rng);
            init_ffn(&mut p, &format!("l{l}.ffn"), d, config.d_ff, &mut rng);
        }
        p.insert("out", Matrix::random_normal(d, v, 1.0 / (d as f64).sqrt(), &mut rng));
        Ok(TinyDecoder::from_parts(name.into(), config, vocab, p))
    }

    /// Builds the vocabulary from the whitespace tokens of `texts`.
    pub fn for_texts<'a>(
        name: impl Into<String>,
        texts: impl IntoIterator<Item = &'a str>,
        config: TransformerConfig,
    ) -> Result<Self> {
        let vocab = Vocab::build(texts.into_iter().flat_map(word_tokens));
        TinyDecoder::new(name, vocab, config)
    }

    fn from_parts(name: String, config: TransformerConfig, vocab: Vocab, params: ParamSet) -> Self {
        let identity = format!("{name}@{}", &params.digest()[..12]);
        TinyDecoder {
            name,
            config,
            vocab,
            params,
            identity,
        }
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        for (name, m) in self.params.iter() {
            match params.get(name) {
                Some(n) if n.shape() == m.shape() => {}
                _ => return Err(RqaError::Shape(format!("parameter `{name}` missing or reshaped"))),
            }
        }
        *self = TinyDecoder::from_parts(self.name.clone(), self.config.clone(), self.vocab.clone(), params);
        Ok(())
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.vocab.encode(&word_tokens(text))
    }

    /// Logits (len(rows) × vocab) predicting the token after each listed position.
    pub fn forward(&self, g: &mut Graph, b: &Bound, ids: &[usize], rows: &[usize]) -> Var {
        let n = ids.len();
        assert!(n <= self.config.max_positions, "sequence longer than max_positions");
        let tok = g.gather_rows(b["tok"], ids);
        let pos = g.gather_rows(b["pos"], &positions(n));
        let mut x = g.add(tok, pos);
        let mask = causal_mask(n);
        let heads = self.config.n_heads;
        for l in 0..self.config.n_layers {
            let prefix = format!("l{l}.attn");
            x = residual(g, x, |g, h| attention(g, b, &prefix, h, h, heads, Some(&mask)).out);
            let prefix = format!("l{l}.ffn");
            x = residual(g, x, |g, h| ffn(g, b, &prefix, h));
        }
        let x = g.rms_norm_rows(x);
        let picked = g.gather_rows(x, rows);
        g.matmul(picked, b["out"])
    }

    /// `<bos> context continuation`, dropping the oldest context tokens when
    /// the sequence (plus `extra` further positions) would not fit.
    fn layout(&self, context: &[usize], continuation: &[usize], extra: usize) -> Result<(Vec<usize>, usize)> {
        let room = self.config.max_positions;
        let needed = 1 + continuation.len() + extra;
        if needed > room {
            return Err(RqaError::Precondition(format!(
                "continuation of {} tokens does not fit in {room} positions",
                continuation.len()
            )));
        }
        let keep = context.len().min(room - needed);
        let ctx = &context[context.len() - keep..];
        let mut seq = Vec::with_capacity(1 + keep + continuation.len());
        seq.push(BOS);
        seq.extend_from_slice(ctx);
        seq.extend_from_slice(continuation);
        Ok((seq, 1 + keep))
    }

    /// Mean cross-entropy over every answer token and the closing `<eos>`,
    /// for a batch of `(prompt ids, answer ids)`; prompt tokens carry no loss.
    pub fn answer_loss(&self, g: &mut Graph, b: &Bound, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<Var> {
        self.sequence_loss(g, b, batch, true)
    }

    /// Like [`TinyDecoder::answer_loss`]; with `mask_prompt` off the prompt
    /// tokens are predicted too.
    pub fn sequence_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &[(Vec<usize>, Vec<usize>)],
        mask_prompt: bool,
    ) -> Result<Var> {
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for (prompt, answer) in batch {
            if answer.is_empty() {
                return Err(RqaError::EmptyContinuation);
            }
            let mut cont = answer.clone();
            cont.push(EOS);
            // the final <eos> is only a target, never an input
            let (mut seq, start) = self.layout(prompt, &cont, 0)?;
            seq.pop();
            let first = if mask_prompt { start - 1 } else { 0 };
            let rows: Vec<usize> = (first..seq.len()).collect();
            logits.push(self.forward(g, b, &seq, &rows));
            targets.extend(seq[first + 1..].iter().chain(std::iter::once(&EOS)).map(|&t| Some(t)));
        }
        let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits) };
        Ok(g.cross_entropy(all, &targets))
    }

    /// `Σ_t log P(continuation_t | <bos> context continuation_<t)`.
    pub fn loglikelihood_ids(&self, context: &[usize], continuation: &[usize]) -> Result<f64> {
        if continuation.is_empty() {
            return Err(RqaError::EmptyContinuation);
        }
        let (seq, start) = self.layout(context, continuation, 0)?;
        let rows: Vec<usize> = (start - 1..seq.len() - 1).collect();
        let mut g = Graph::new();
        let b = g.bind_frozen(&self.params);
        let logits = self.forward(&mut g, &b, &seq, &rows);
        let m = g.value(logits);
        let total = continuation
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax(m.row(i))[t])
            .sum::<f64>();
        if !total.is_finite() {
            return Err(RqaError::Numerical("log-likelihood".into()));
        }
        Ok(total)
    }

    /// Next-token logits after `<bos> context`.
    pub fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        let (seq, _) = self.layout(context, &[], 0)?;
        let mut g = Graph::new();
        let b = g.bind_frozen(&self.params);
        let logits = self.forward(&mut g, &b, &seq, &[seq.len() - 1]);
        Ok(g.value(logits).row(0).to_vec())
    }

    /// Decodes until `<eos>` or `max_new_tokens`.
    pub fn generate_ids(&self, prompt: &[usize], sampling: &SamplingParams) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut context = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..sampling.max_new_tokens {
            let logits = self.next_logits(&context)?;
            let next = sample_token(&logits, sampling, &mut rng);
            if next == EOS {
                break;
            }
            out.push(next);
            context.push(next);
        }
        Ok(out)
    }

    pub fn generate_text(&self, prompt: &str, sampling: &SamplingParams) -> Result<String> {
        let ids = self.generate_ids(&self.encode(prompt), sampling)?;
        Ok(self.vocab.decode(&ids))
    }

    pub fn loglikelihood(&self, context: &str, continuation: &str) -> Result<f64> {
        self.loglikelihood_ids(&self.encode(context), &self.encode(continuation))
    }

    pub fn save(&self, dir: &Path, training: Option<serde_json::Value>) -> Result<()> {
        let manifest = Manifest {
            kind: TINY_DECODER_KIND.into(),
            name: self.name.clone(),
            config: serde_json::to_value(&self.config)?,
            vocab: self.vocab.clone(),
            training,
        };
        checkpoint::save(dir, &manifest, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = checkpoint::load(dir, TINY_DECODER_KIND)?;
        let config: TransformerConfig = serde_json::from_value(manifest.config)?;
        let mut model = TinyDecoder::new(manifest.name, manifest.vocab, config)?;
        model.set_params(params)?;
        Ok(model)
    }
}
