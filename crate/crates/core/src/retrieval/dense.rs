use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use super::{top_k, Embedder, Hit, RetrievalResult, Retriever};
use crate::corpus::PassageStore;
use crate::error::{Result, RqaError};
use crate::nn::matrix::dot;

/// Leading bytes of every index file; the trailing digit is the format version.
pub const INDEX_MAGIC: &[u8; 7] = b"RQAIDX1";

/// Exact inner-product index. Vectors are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    identity: String,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

impl VectorIndex {
    pub fn from_vectors(identity: impl Into<String>, dim: usize, ids: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(RqaError::Shape(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let mut data = Vec::with_capacity(dim * vectors.len());
        for v in vectors {
            if v.len() != dim {
                return Err(RqaError::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(RqaError::Numerical("passage embedding".into()));
            }
            data.extend(v);
        }
        Ok(VectorIndex {
            identity: identity.into(),
            dim,
            ids,
            data,
        })
    }

    /// Embeds every passage of `store`.
    pub fn build(store: &PassageStore, embedder: &dyn Embedder) -> Result<Self> {
        let vectors: Vec<Vec<f64>> = store
            .passages()
            .par_iter()
            .map(|p| embedder.embed_passage(&p.content))
            .collect::<Result<_>>()?;
        let ids = store.iter().map(|p| p.passage_id.clone()).collect();
        VectorIndex::from_vectors(embedder.identity(), embedder.dimension(), ids, vectors)
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact top-`k` by inner product with `query`.
    pub fn search_vector(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if query.len() != self.dim {
            return Err(RqaError::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        if !query.iter().all(|x| x.is_finite()) {
            return Err(RqaError::Numerical("query embedding".into()));
        }
        let dim = self.dim.max(1);
        let scores = self.data.chunks(dim).map(|v| dot(v, query));
        Ok(top_k(scores.zip(self.ids.iter().map(String::as_str)), k)
            .into_iter()
            .map(|(i, score)| Hit {
                passage_id: self.ids[i].clone(),
                score,
            })
            .collect())
    }

    fn check_embedder(&self, embedder: &dyn Embedder) -> Result<()> {
        if embedder.dimension() != self.dim {
            return Err(RqaError::DimensionMismatch {
                expected: self.dim,
                actual: embedder.dimension(),
            });
        }
        let identity = embedder.identity();
        if identity != self.identity {
            return Err(RqaError::IdentityMismatch {
                index: self.identity.clone(),
                embedder: identity,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&(self.identity.len() as u32).to_le_bytes())?;
        w.write_all(self.identity.as_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let corrupt = |message: &str| RqaError::Load {
            path: path.to_path_buf(),
            line: 0,
            message: message.to_string(),
        };
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != INDEX_MAGIC {
            return Err(corrupt("not an RQAIDX1 index file"));
        }
        let mut take = |n: usize| -> Result<Vec<u8>> {
            if r.len() < n {
                return Err(corrupt("unexpected end of file"));
            }
            let (head, rest) = r.split_at(n);
            r = rest;
            Ok(head.to_vec())
        };
        let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let u64_at = |b: Vec<u8>| u64::from_le_bytes(b.try_into().unwrap()) as usize;
        let id_len = u32_at(take(4)?);
        let identity = String::from_utf8(take(id_len)?).map_err(|_| corrupt("identity is not UTF-8"))?;
        let dim = u64_at(take(8)?);
        let count = u64_at(take(8)?);
        let n_values = dim
            .checked_mul(count)
            .filter(|n| n.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| corrupt("vector block larger than file"))?;
        let block = take(n_values * 8)?;
        let data: Vec<f64> = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_at(take(4)?);
            ids.push(String::from_utf8(take(len)?).map_err(|_| corrupt("passage id is not UTF-8"))?);
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes after passage ids"));
        }
        Ok(VectorIndex {
            identity,
            dim,
            ids,
            data,
        })
    }
}

/// Embeds `query` and returns the exact top-`k` passages.
pub fn dense_search(index: &VectorIndex, embedder: &dyn Embedder, query: &str, k: usize) -> Result<RetrievalResult> {
    index.check_embedder(embedder)?;
    if query.trim().is_empty() {
        return Err(RqaError::EmptyQuery);
    }
    if k == 0 {
        return Err(RqaError::Precondition("k must be at least 1".into()));
    }
    let q = embedder.embed_query(query)?;
    Ok(RetrievalResult {
        query: query.to_string(),
        k,
        hits: index.search_vector(&q, k)?,
    })
}

/// A vector index paired with the embedder that built it.
#[derive(Clone)]
pub struct DenseRetriever {
    index: Arc<VectorIndex>,
    embedder: Arc<dyn Embedder>,
}

impl DenseRetriever {
    pub fn new(index: Arc<VectorIndex>, embedder: Arc<dyn Embedder>) -> Result<Self> {
        index.check_embedder(embedder.as_ref())?;
        Ok(DenseRetriever { index, embedder })
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }
}

impl Retriever for DenseRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult> {
        dense_search(&self.index, self.embedder.as_ref(), query, k)
    }
}
