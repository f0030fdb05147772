use std::collections::HashSet;

use crate::model::{ModelConfig, ParamStore};
use crate::retrieval::{dot, encode_all, norm, similarity, Metric};
use crate::text::TokenSequence;
use crate::{Error, Result};

use super::run::{Hit, QueryRun, RunResult};

/// Document embeddings for exact search.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    doc_ids: Vec<String>,
    embeddings: Vec<f32>,
    dim: usize,
    metric: Metric,
}

impl RetrievalIndex {
    pub fn new(doc_ids: Vec<String>, embeddings: Vec<Vec<f32>>, metric: Metric) -> Result<Self> {
        if doc_ids.is_empty() {
            return Err(Error::Data("cannot index an empty collection".into()));
        }
        if doc_ids.len() != embeddings.len() {
            return Err(Error::Data(format!(
                "{} document ids but {} embeddings",
                doc_ids.len(),
                embeddings.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(d) = doc_ids.iter().find(|d| !seen.insert(d.as_str())) {
            return Err(Error::Data(format!("duplicate document id {d:?} in index")));
        }
        let dim = embeddings[0].len();
        if let Some(e) = embeddings.iter().find(|e| e.len() != dim) {
            return Err(Error::Data(format!("embedding dimension {} differs from {dim}", e.len())));
        }
        if metric == Metric::Cosine && embeddings.iter().any(|e| norm(e) == 0.0) {
            return Err(Error::DegenerateVector);
        }
        Ok(RetrievalIndex {
            doc_ids,
            embeddings: embeddings.concat(),
            dim,
            metric,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// Embedding of the document with id `id`.
    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.doc_ids.iter().position(|d| d == id).map(|i| self.embedding(i))
    }

    /// Scores against every document, in index order.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::Tensor(seedenc_tensor::TensorError::Shape {
                op: "search",
                lhs: vec![query.len()],
                rhs: vec![self.dim],
            }));
        }
        match self.metric {
            Metric::Dot => Ok((0..self.len()).map(|i| dot(query, self.embedding(i))).collect()),
            Metric::Cosine => (0..self.len())
                .map(|i| similarity(query, self.embedding(i), Metric::Cosine))
                .collect(),
        }
    }

    /// Exact top-`k`, scores descending, ties by ascending document id.
    /// `k` larger than the collection is clipped.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k > self.len() {
            log::warn!("search depth {k} exceeds collection size {}; clipped", self.len());
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |&a: &usize, &b: &usize| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.doc_ids[a].cmp(&self.doc_ids[b]))
        };
        let k = k.min(self.len());
        if k < order.len() && k > 0 {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        order.truncate(k);
        order.sort_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                doc_id: self.doc_ids[i].clone(),
                score: scores[i],
            })
            .collect())
    }

    /// Searches every query; `query_ids` and `embeddings` are parallel.
    pub fn search_all(&self, query_ids: &[String], embeddings: &[Vec<f32>], k: usize) -> Result<RunResult> {
        if query_ids.len() != embeddings.len() {
            return Err(Error::Data(format!(
                "{} query ids but {} embeddings",
                query_ids.len(),
                embeddings.len()
            )));
        }
        let queries = query_ids
            .iter()
            .zip(embeddings)
            .map(|(q, e)| {
                Ok(QueryRun {
                    query_id: q.clone(),
                    hits: self.search(e, k)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunResult { queries })
    }
}

/// Encodes every document with the encoder in eval mode.
pub fn build_index(
    cfg: &ModelConfig,
    params: &ParamStore,
    doc_ids: &[String],
    docs: &[TokenSequence],
    metric: Metric,
) -> Result<RetrievalIndex> {
    if docs.is_empty() {
        return Err(Error::Data("cannot index an empty collection".into()));
    }
    RetrievalIndex::new(doc_ids.to_vec(), encode_all(cfg, params, docs)?, metric)
}

/// Exact top-`k` retrieval of every query of `data` over its documents.
pub fn retrieve(
    cfg: &ModelConfig,
    params: &ParamStore,
    data: &crate::retrieval::TokenizedDataset,
    metric: Metric,
    k: usize,
) -> Result<RunResult> {
    let index = build_index(cfg, params, &data.doc_ids, &data.docs, metric)?;
    let queries = encode_all(cfg, params, &data.queries)?;
    index.search_all(&data.query_ids, &queries, k.min(index.len()))
}
