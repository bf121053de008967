use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Manifest};
use super::graph::{Bound, Graph, Var};
use super::matrix::{dot, Matrix};
use super::params::ParamSet;
use super::vocab::{feature_tokens, Vocab, UNK};
use crate::error::{Result, RqaError};
use crate::retrieval::Embedder;

pub const LINEAR_EMBEDDER_KIND: &str = "linear-embedder";
const TABLE: &str = "embedding";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearEmbedderConfig {
    pub dim: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LinearEmbedderConfig {
    fn default() -> Self {
        LinearEmbedderConfig {
            dim: 32,
            init_std: 1.0,
            seed: 0,
        }
    }
}

/// Bag-of-words embedder: the mean of per-token embedding rows, scaled to
/// unit length. Queries and passages share one table.
#[derive(Clone, Debug)]
pub struct LinearEmbedder {
    name: String,
    config: LinearEmbedderConfig,
    vocab: Vocab,
    params: ParamSet,
    identity: String,
}

impl LinearEmbedder {
    pub fn new(name: impl Into<String>, vocab: Vocab, config: LinearEmbedderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        params.insert(TABLE, Matrix::random_normal(vocab.len(), config.dim, config.init_std, &mut rng));
        LinearEmbedder::from_parts(name.into(), config, vocab, params)
    }

    /// Builds the vocabulary from `texts` before initializing.
    pub fn for_texts<'a>(
        name: impl Into<String>,
        texts: impl IntoIterator<Item = &'a str>,
        config: LinearEmbedderConfig,
    ) -> Self {
        let vocab = Vocab::build(texts.into_iter().flat_map(feature_tokens));
        LinearEmbedder::new(name, vocab, config)
    }

    fn from_parts(name: String, config: LinearEmbedderConfig, vocab: Vocab, params: ParamSet) -> Self {
        let identity = format!("{name}@{}", &params.digest()[..12]);
        LinearEmbedder {
            name,
            config,
            vocab,
            params,
            identity,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &LinearEmbedderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        let table = params
            .get(TABLE)
            .ok_or_else(|| RqaError::Config(format!("missing parameter `{TABLE}`")))?;
        if table.shape() != (self.vocab.len(), self.config.dim) {
            return Err(RqaError::Shape(format!(
                "embedding table is {:?}, expected {:?}",
                table.shape(),
                (self.vocab.len(), self.config.dim)
            )));
        }
        *self = LinearEmbedder::from_parts(self.name.clone(), self.config.clone(), self.vocab.clone(), params);
        Ok(())
    }

    /// Token ids of `text`; a text without known tokens maps to `<unk>`.
    pub fn featurize(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = feature_tokens(text).iter().map(|t| self.vocab.id(t)).collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    /// Differentiable embeddings of `texts`, one unit row per text.
    pub fn embed_graph(&self, g: &mut Graph, bound: &Bound, texts: &[&str]) -> Var {
        let bags = texts.iter().map(|t| self.featurize(t)).collect();
        let mean = g.bag_mean(bound[TABLE], bags);
        g.normalize_rows(mean)
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let table = self.params.get(TABLE).expect("table present");
        let ids = self.featurize(text);
        let mut v = vec![0.0; self.config.dim];
        let w = 1.0 / ids.len() as f64;
        for id in ids {
            for (o, x) in v.iter_mut().zip(table.row(id)) {
                *o += w * x;
            }
        }
        let n = (dot(&v, &v) + 1e-12).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    pub fn save(&self, dir: &Path, training: Option<serde_json::Value>) -> Result<()> {
        let manifest = Manifest {
            kind: LINEAR_EMBEDDER_KIND.into(),
            name: self.name.clone(),
            config: serde_json::to_value(&self.config)?,
            vocab: self.vocab.clone(),
            training,
        };
        checkpoint::save(dir, &manifest, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = checkpoint::load(dir, LINEAR_EMBEDDER_KIND)?;
        let config: LinearEmbedderConfig = serde_json::from_value(manifest.config)?;
        let mut model = LinearEmbedder::new(manifest.name, manifest.vocab, config);
        model.set_params(params)?;
        Ok(model)
    }
}

impl Embedder for LinearEmbedder {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn dimension(&self) -> usize {
        self.config.dim
    }

    fn embed_query(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed(text))
    }

    fn embed_passage(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_and_direct_paths_agree() {
        let e = LinearEmbedder::for_texts("t", ["alpha beta", "gamma"], LinearEmbedderConfig::default());
        let mut g = Graph::new();
        let b = g.bind_frozen(e.params());
        let texts = ["alpha gamma alpha", "nothing known", ""];
        let v = e.embed_graph(&mut g, &b, &texts);
        for (i, t) in texts.iter().enumerate() {
            let direct = e.embed_query(t).unwrap();
            for (a, b) in direct.iter().zip(g.value(v).row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((dot(&direct, &direct) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_keeps_identity() {
        let dir = tempfile::tempdir().unwrap();
        let e = LinearEmbedder::for_texts("t", ["a b c"], LinearEmbedderConfig { dim: 4, ..Default::default() });
        e.save(dir.path(), None).unwrap();
        let back = LinearEmbedder::load(dir.path()).unwrap();
        assert_eq!(back.identity(), e.identity());
        assert_eq!(back.embed_query("a c").unwrap(), e.embed_query("a c").unwrap());
        assert!(matches!(LinearEmbedder::load(&dir.path().join("missing")), Err(RqaError::Config(_))));
    }

    #[test]
    fn identity_tracks_weights() {
        let mut e = LinearEmbedder::for_texts("t", ["a"], LinearEmbedderConfig::default());
        let before = e.identity();
        let mut p = e.params().clone();
        p.get_mut(TABLE).unwrap().data_mut()[0] += 1.0;
        e.set_params(p).unwrap();
        assert_ne!(before, e.identity());
    }
}
