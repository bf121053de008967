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

pub const TINY_ENCODER_DECODER_KIND: &str = "tiny-encoder-decoder";

/// Output of one encoder-decoder forward pass.
pub struct Seq2SeqOutput {
    pub logits: Var,
    /// Cross-attention probabilities, one (decoder positions × encoder
    /// tokens) matrix per layer and head.
    pub cross_attention: Vec<Var>,
    /// Encoder tokens contributed by each input, in input order.
    pub input_lengths: Vec<usize>,
}

/// A small encoder-decoder transformer. Several inputs can be encoded
/// independently and fused: the decoder cross-attends to the concatenation
/// of all encoder states. No input-index embedding is added, so the output
/// does not depend on the order of the inputs.
#[derive(Clone, Debug)]
pub struct TinyEncoderDecoder {
    name: String,
    config: TransformerConfig,
    vocab: Vocab,
    params: ParamSet,
    identity: String,
}

impl TinyEncoderDecoder {
    pub fn new(name: impl Into<String>, vocab: Vocab, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d) = (vocab.len(), config.d_model);
        let mut p = ParamSet::new();
        p.insert("tok", Matrix::random_normal(v, d, 1.0, &mut rng));
        p.insert("enc_pos", Matrix::random_normal(config.max_positions, d, 0.1, &mut rng));
        p.insert("dec_pos", Matrix::random_normal(config.max_positions, d, 0.1, &mut rng));
        for l in 0..config.n_layers {
            init_attention(&mut p, &format!("enc{l}.attn"), d, &mut rng);
            init_ffn(&mut p, &format!("enc{l}.ffn"), d, config.d_ff, &mut rng);
            init_attention(&mut p, &format!("dec{l}.self"), d, &mut rng);
            init_attention(&mut p, &format!("dec{l}.cross"), d, &mut rng);
            init_ffn(&mut p, &format!("dec{l}.ffn"), d, config.d_ff, &mut rng);
        }
        p.insert("out", Matrix::random_normal(d, v, 1.0 / (d as f64).sqrt(), &mut rng));
        Ok(TinyEncoderDecoder::from_parts(name.into(), config, vocab, p))
    }

    pub fn for_texts<'a>(
        name: impl Into<String>,
        texts: impl IntoIterator<Item = &'a str>,
        config: TransformerConfig,
    ) -> Result<Self> {
        let mut vocab = Vocab::build(texts.into_iter().flat_map(word_tokens));
        vocab.add("question:");
        vocab.add("context:");
        TinyEncoderDecoder::new(name, vocab, config)
    }

    fn from_parts(name: String, config: TransformerConfig, vocab: Vocab, params: ParamSet) -> Self {
        let identity = format!("{name}@{}", &params.digest()[..12]);
        TinyEncoderDecoder {
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
        *self = TinyEncoderDecoder::from_parts(self.name.clone(), self.config.clone(), self.vocab.clone(), params);
        Ok(())
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.vocab.encode(&word_tokens(text))
    }

    /// `question: <q> context: <p>`, cut to the per-input position budget.
    pub fn fid_input_ids(&self, question: &str, passage: &str) -> Vec<usize> {
        let mut ids = vec![self.vocab.id("question:")];
        ids.extend(self.encode(question));
        ids.push(self.vocab.id("context:"));
        ids.extend(self.encode(passage));
        ids.truncate(self.config.max_positions);
        ids
    }

    fn encode_input(&self, g: &mut Graph, b: &Bound, ids: &[usize]) -> Var {
        let tok = g.gather_rows(b["tok"], ids);
        let pos = g.gather_rows(b["enc_pos"], &positions(ids.len()));
        let mut x = g.add(tok, pos);
        let heads = self.config.n_heads;
        for l in 0..self.config.n_layers {
            let prefix = format!("enc{l}.attn");
            x = residual(g, x, |g, h| attention(g, b, &prefix, h, h, heads, None).out);
            let prefix = format!("enc{l}.ffn");
            x = residual(g, x, |g, h| ffn(g, b, &prefix, h));
        }
        g.rms_norm_rows(x)
    }

    /// Encodes every input separately, then decodes `decoder_ids` with
    /// cross-attention over all encoder states. Returns logits for `rows`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        inputs: &[Vec<usize>],
        decoder_ids: &[usize],
        rows: &[usize],
    ) -> Result<Seq2SeqOutput> {
        if inputs.is_empty() || inputs.iter().any(Vec::is_empty) {
            return Err(RqaError::Precondition("every encoder input needs at least one token".into()));
        }
        if decoder_ids.len() > self.config.max_positions || inputs.iter().any(|i| i.len() > self.config.max_positions) {
            return Err(RqaError::Precondition("sequence longer than max_positions".into()));
        }
        let encoded: Vec<Var> = inputs.iter().map(|ids| self.encode_input(g, b, ids)).collect();
        let memory = if encoded.len() == 1 { encoded[0] } else { g.concat_rows(&encoded) };

        let n = decoder_ids.len();
        let tok = g.gather_rows(b["tok"], decoder_ids);
        let pos = g.gather_rows(b["dec_pos"], &positions(n));
        let mut x = g.add(tok, pos);
        let mask = causal_mask(n);
        let heads = self.config.n_heads;
        let mut cross_attention = Vec::new();
        for l in 0..self.config.n_layers {
            let prefix = format!("dec{l}.self");
            x = residual(g, x, |g, h| attention(g, b, &prefix, h, h, heads, Some(&mask)).out);
            let prefix = format!("dec{l}.cross");
            x = residual(g, x, |g, h| {
                let a = attention(g, b, &prefix, h, memory, heads, None);
                cross_attention.extend(a.probs);
                a.out
            });
            let prefix = format!("dec{l}.ffn");
            x = residual(g, x, |g, h| ffn(g, b, &prefix, h));
        }
        let x = g.rms_norm_rows(x);
        let picked = g.gather_rows(x, rows);
        Ok(Seq2SeqOutput {
            logits: g.matmul(picked, b["out"]),
            cross_attention,
            input_lengths: inputs.iter().map(Vec::len).collect(),
        })
    }

    fn target_layout(&self, answer: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        if answer.is_empty() {
            return Err(RqaError::EmptyContinuation);
        }
        if answer.len() + 1 > self.config.max_positions {
            return Err(RqaError::Precondition(format!(
                "answer of {} tokens does not fit in {} decoder positions",
                answer.len(),
                self.config.max_positions
            )));
        }
        let mut dec = vec![BOS];
        dec.extend_from_slice(answer);
        let mut targets = answer.to_vec();
        targets.push(EOS);
        Ok((dec, targets))
    }

    /// Mean cross-entropy of answer tokens plus `<eos>` over a batch of
    /// `(encoder inputs, answer ids)`.
    pub fn answer_loss(&self, g: &mut Graph, b: &Bound, batch: &[(Vec<Vec<usize>>, Vec<usize>)]) -> Result<Var> {
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for (inputs, answer) in batch {
            let (dec, tgt) = self.target_layout(answer)?;
            let rows = positions(dec.len());
            logits.push(self.forward(g, b, inputs, &dec, &rows)?.logits);
            targets.extend(tgt.into_iter().map(Some));
        }
        let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits) };
        Ok(g.cross_entropy(all, &targets))
    }

    /// Logits for every decoder position of `<bos> answer`, for comparisons.
    pub fn teacher_forced_logits(&self, inputs: &[Vec<usize>], answer: &[usize]) -> Result<Matrix> {
        let mut dec = vec![BOS];
        dec.extend_from_slice(answer);
        let mut g = Graph::new();
        let b = g.bind_frozen(&self.params);
        let out = self.forward(&mut g, &b, inputs, &dec, &positions(dec.len()))?;
        Ok(g.value(out.logits).clone())
    }

    /// Cross-attention maps (one per layer and head) and per-input token
    /// counts while teacher-forcing `answer`.
    pub fn cross_attention(&self, inputs: &[Vec<usize>], answer: &[usize]) -> Result<(Vec<Matrix>, Vec<usize>)> {
        let (dec, _) = self.target_layout(answer)?;
        let mut g = Graph::new();
        let b = g.bind_frozen(&self.params);
        let out = self.forward(&mut g, &b, inputs, &dec, &[dec.len() - 1])?;
        let maps = out.cross_attention.iter().map(|&v| g.value(v).clone()).collect();
        Ok((maps, out.input_lengths))
    }

    pub fn loglikelihood_ids(&self, inputs: &[Vec<usize>], continuation: &[usize]) -> Result<f64> {
        if continuation.is_empty() {
            return Err(RqaError::EmptyContinuation);
        }
        let logits = self.teacher_forced_logits(inputs, &continuation[..continuation.len() - 1])?;
        let total: f64 = continuation
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax(logits.row(i))[t])
            .sum();
        if !total.is_finite() {
            return Err(RqaError::Numerical("log-likelihood".into()));
        }
        Ok(total)
    }

    pub fn generate_ids(&self, inputs: &[Vec<usize>], sampling: &SamplingParams) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let mut out: Vec<usize> = Vec::new();
        let limit = sampling.max_new_tokens.min(self.config.max_positions - 1);
        for _ in 0..limit {
            let logits = self.teacher_forced_logits(inputs, &out)?;
            let next = sample_token(logits.row(logits.rows() - 1), sampling, &mut rng);
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, training: Option<serde_json::Value>) -> Result<()> {
        let manifest = Manifest {
            kind: TINY_ENCODER_DECODER_KIND.into(),
            name: self.name.clone(),
            config: serde_json::to_value(&self.config)?,
            vocab: self.vocab.clone(),
            training,
        };
        checkpoint::save(dir, &manifest, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = checkpoint::load(dir, TINY_ENCODER_DECODER_KIND)?;
        let config: TransformerConfig = serde_json::from_value(manifest.config)?;
        let mut model = TinyEncoderDecoder::new(manifest.name, manifest.vocab, config)?;
        model.set_params(params)?;
        Ok(model)
    }
}
