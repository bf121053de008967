//! Pieces shared by the tiny decoder and encoder-decoder: pre-norm
//! multi-head attention, a tanh feed-forward block, masks and sampling.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::graph::{Bound, Graph, Var};
use super::matrix::{softmax, Matrix};
use super::params::ParamSet;
use crate::llm::SamplingParams;

/// Additive mask value for disallowed attention links.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Longest sequence (per encoder input, for the encoder-decoder).
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_positions: 256,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(crate::RqaError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_positions < 2 {
            return Err(crate::RqaError::Config("max_positions must be at least 2".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_attention(p: &mut ParamSet, prefix: &str, d: usize, rng: &mut dyn RngCore) {
    let std = 1.0 / (d as f64).sqrt();
    for w in ["wq", "wk", "wv", "wo"] {
        p.insert(format!("{prefix}.{w}"), Matrix::random_normal(d, d, std, rng));
    }
}

pub(crate) fn init_ffn(p: &mut ParamSet, prefix: &str, d: usize, ff: usize, rng: &mut dyn RngCore) {
    p.insert(format!("{prefix}.w1"), Matrix::random_normal(d, ff, 1.0 / (d as f64).sqrt(), rng));
    p.insert(format!("{prefix}.b1"), Matrix::zeros(1, ff));
    p.insert(format!("{prefix}.w2"), Matrix::random_normal(ff, d, 1.0 / (ff as f64).sqrt(), rng));
    p.insert(format!("{prefix}.b2"), Matrix::zeros(1, d));
}

pub(crate) struct AttentionOut {
    pub out: Var,
    /// One (queries × keys) probability matrix per head.
    pub probs: Vec<Var>,
}

/// Multi-head attention of `x` over `memory` (pass `x` again for self-attention).
pub(crate) fn attention(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    x: Var,
    memory: Var,
    n_heads: usize,
    mask: Option<&Matrix>,
) -> AttentionOut {
    let q = g.matmul(x, b[&format!("{prefix}.wq")[..]]);
    let k = g.matmul(memory, b[&format!("{prefix}.wk")[..]]);
    let v = g.matmul(memory, b[&format!("{prefix}.wv")[..]]);
    let d = g.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        let s = g.matmul_t(qh, kh);
        let mut s = g.scale(s, scale);
        if let Some(m) = mask {
            s = g.add_const(s, m);
        }
        let p = g.softmax_rows(s);
        heads.push(g.matmul(p, vh));
        probs.push(p);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    let out = g.matmul(cat, b[&format!("{prefix}.wo")[..]]);
    AttentionOut { out, probs }
}

pub(crate) fn ffn(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = g.matmul(x, b[&format!("{prefix}.w1")[..]]);
    let h = g.add_row(h, b[&format!("{prefix}.b1")[..]]);
    let h = g.tanh(h);
    let o = g.matmul(h, b[&format!("{prefix}.w2")[..]]);
    g.add_row(o, b[&format!("{prefix}.b2")[..]])
}

/// Pre-norm residual block: `x + f(rms(x))`.
pub(crate) fn residual(g: &mut Graph, x: Var, f: impl FnOnce(&mut Graph, Var) -> Var) -> Var {
    let h = g.rms_norm_rows(x);
    let out = f(g, h);
    g.add(x, out)
}

pub(crate) fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        for c in r + 1..n {
            m.set(r, c, MASKED);
        }
    }
    m
}

pub(crate) fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Greedy at temperature 0, otherwise nucleus sampling.
pub(crate) fn sample_token(logits: &[f64], sampling: &SamplingParams, rng: &mut dyn RngCore) -> usize {
    if sampling.temperature <= 0.0 {
        // first maximum, so ties resolve to the lowest id
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / sampling.temperature).collect();
    let probs = softmax(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if mass >= sampling.top_p {
            break;
        }
    }
    let mut u = rng.random::<f64>() * mass;
    for &i in &kept {
        u -= probs[i];
        if u <= 0.0 {
            return i;
        }
    }
    *kept.last().expect("non-empty vocabulary")
}
