use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

/// Collection statistics needed by [`bm25_score`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub doc_freq: HashMap<u32, usize>,
    pub avg_len: f64,
}

impl CorpusStats {
    pub fn from_docs<'a>(docs: impl IntoIterator<Item = &'a [u32]>) -> CorpusStats {
        let mut doc_freq: HashMap<u32, usize> = HashMap::new();
        let (mut n, mut total) = (0usize, 0usize);
        for doc in docs {
            n += 1;
            total += doc.len();
            let mut seen: Vec<u32> = doc.to_vec();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *doc_freq.entry(t).or_default() += 1;
            }
        }
        CorpusStats {
            num_docs: n,
            doc_freq,
            avg_len: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        }
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn idf(&self, term: u32) -> f64 {
        let df = self.doc_freq.get(&term).copied().unwrap_or(0) as f64;
        (1.0 + (self.num_docs as f64 - df + 0.5) / (df + 0.5)).ln()
    }
}

/// Okapi BM25, summed over query term occurrences.
pub fn bm25_score(query: &[u32], doc: &[u32], stats: &CorpusStats, params: Bm25Params) -> f64 {
    let mut tf: HashMap<u32, usize> = HashMap::new();
    for &t in doc {
        *tf.entry(t).or_default() += 1;
    }
    score_with_tf(query, &tf, doc.len(), stats, params)
}

fn score_with_tf(query: &[u32], tf: &HashMap<u32, usize>, len: usize, stats: &CorpusStats, p: Bm25Params) -> f64 {
    let norm = if stats.avg_len > 0.0 {
        p.k1 * (1.0 - p.b + p.b * len as f64 / stats.avg_len)
    } else {
        p.k1
    };
    query
        .iter()
        .map(|t| match tf.get(t) {
            Some(&f) => {
                let f = f as f64;
                stats.idf(*t) * f * (p.k1 + 1.0) / (f + norm)
            }
            None => 0.0,
        })
        .sum()
}

/// Precomputed term frequencies for ranking a fixed collection.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    pub stats: CorpusStats,
    pub params: Bm25Params,
    tf: Vec<HashMap<u32, usize>>,
    lens: Vec<usize>,
}

impl Bm25Index {
    pub fn build<'a>(docs: &[&'a [u32]], params: Bm25Params) -> Bm25Index {
        let stats = CorpusStats::from_docs(docs.iter().copied());
        let tf = docs
            .iter()
            .map(|d| {
                let mut m = HashMap::new();
                for &t in d.iter() {
                    *m.entry(t).or_default() += 1;
                }
                m
            })
            .collect();
        Bm25Index {
            stats,
            params,
            tf,
            lens: docs.iter().map(|d| d.len()).collect(),
        }
    }

    pub fn score(&self, query: &[u32], doc: usize) -> f64 {
        score_with_tf(query, &self.tf[doc], self.lens[doc], &self.stats, self.params)
    }

    /// Top `depth` documents by score, ties broken by ascending index.
    pub fn rank(&self, query: &[u32], depth: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..self.tf.len()).map(|i| (i, self.score(query, i))).collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(depth);
        all
    }
}
