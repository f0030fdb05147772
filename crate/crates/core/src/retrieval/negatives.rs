use std::collections::BTreeSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bm25::{Bm25Index, Bm25Params};
use super::data::TokenizedDataset;
use super::encode::{encode_all, Metric};
use crate::eval::RetrievalIndex;
use crate::model::{ModelConfig, ParamStore};
use crate::text::{TokenSequence, Vocabulary};
use crate::{Error, Result};

/// A query with one relevant and one non-relevant document, by index into
/// the dataset it was mined from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TripletExample {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
}

impl TripletExample {
    pub fn sequences<'a>(&self, data: &'a TokenizedDataset) -> [&'a TokenSequence; 3] {
        [&data.queries[self.query], &data.docs[self.positive], &data.docs[self.negative]]
    }
}

fn check_queries(data: &TokenizedDataset, queries: &[usize]) -> Result<()> {
    let missing: Vec<String> = queries
        .iter()
        .filter(|&&q| data.relevant(q).is_empty())
        .map(|&q| data.query_ids[q].clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingQrels(missing))
    }
}

/// Pairs each relevant document of `q` with each negative.
fn expand<'a>(q: usize, relevant: &'a [usize], negatives: &'a [usize]) -> impl Iterator<Item = TripletExample> + 'a {
    relevant.iter().flat_map(move |&p| {
        negatives.iter().map(move |&n| TripletExample {
            query: q,
            positive: p,
            negative: n,
        })
    })
}

fn uniform_negatives(data: &TokenizedDataset, q: usize, per_query: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let pool: Vec<usize> = (0..data.docs.len()).filter(|&d| !data.is_relevant(q, d)).collect();
    pool.choose_multiple(rng, per_query.min(pool.len())).copied().collect()
}

/// Lexical negatives: for each query in `queries`, `per_query` documents
/// sampled uniformly from the BM25 top `depth` minus the relevant ones,
/// each paired with every relevant document.
pub fn mine_lexical_negatives(
    data: &TokenizedDataset,
    queries: &[usize],
    per_query: usize,
    depth: usize,
    seed: u64,
) -> Result<Vec<TripletExample>> {
    check_queries(data, queries)?;
    let docs: Vec<&[u32]> = data.docs.iter().map(|d| d.words()).collect();
    let index = Bm25Index::build(&docs, Bm25Params::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &q in queries {
        let relevant = data.relevant(q);
        let pool: Vec<usize> = index
            .rank(data.queries[q].words(), depth)
            .into_iter()
            .map(|(d, _)| d)
            .filter(|&d| !data.is_relevant(q, d))
            .collect();
        let negatives: Vec<usize> = if pool.is_empty() {
            log::warn!(
                "query {}: BM25 top-{depth} is all relevant; using uniform negatives",
                data.query_ids[q]
            );
            uniform_negatives(data, q, per_query, &mut rng)
        } else {
            pool.choose_multiple(&mut rng, per_query.min(pool.len())).copied().collect()
        };
        out.extend(expand(q, &relevant, &negatives));
    }
    Ok(out)
}

/// Model-mined negatives: the `per_query` highest-scoring non-relevant
/// documents among the exact top `depth` under the current encoder.
pub fn refresh_hard_negatives(
    cfg: &ModelConfig,
    params: &ParamStore,
    data: &TokenizedDataset,
    queries: &[usize],
    per_query: usize,
    depth: usize,
    metric: Metric,
    seed: u64,
) -> Result<Vec<TripletExample>> {
    check_queries(data, queries)?;
    let index = RetrievalIndex::new(data.doc_ids.clone(), encode_all(cfg, params, &data.docs)?, metric)?;
    let subset: Vec<TokenSequence> = queries.iter().map(|&q| data.queries[q].clone()).collect();
    let q_emb = encode_all(cfg, params, &subset)?;
    let position: std::collections::HashMap<&str, usize> =
        data.doc_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (&q, e) in queries.iter().zip(&q_emb) {
        let relevant = data.relevant(q);
        let negatives: Vec<usize> = index
            .search(e, depth.min(index.len()))?
            .into_iter()
            .map(|h| position[h.doc_id.as_str()])
            .filter(|&d| !data.is_relevant(q, d))
            .take(per_query)
            .collect();
        let negatives = if negatives.is_empty() {
            log::warn!(
                "query {}: exact top-{depth} is all relevant; using uniform negatives",
                data.query_ids[q]
            );
            uniform_negatives(data, q, per_query, &mut rng)
        } else {
            negatives
        };
        out.extend(expand(q, &relevant, &negatives));
    }
    Ok(out)
}

/// Deterministic nested subsets: the first `floor(fraction * n)` entries
/// of one seeded permutation of `0..n`.
pub fn select_label_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let take = (fraction * n as f64 + 1e-9).floor() as usize;
    if take == 0 {
        return Err(Error::Config(format!(
            "label fraction {fraction} of {n} queries selects no training queries"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm.truncate(take);
    Ok(perm)
}

fn text(vocab: &Vocabulary, seq: &TokenSequence) -> String {
    seq.words()
        .iter()
        .map(|&t| vocab.token(t).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Triples as `query_text<TAB>positive_text<TAB>negative_text`.
pub fn write_triples(path: &Path, data: &TokenizedDataset, vocab: &Vocabulary, triples: &[TripletExample]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for t in triples {
        let [q, p, n] = t.sequences(data);
        writeln!(f, "{}\t{}\t{}", text(vocab, q), text(vocab, p), text(vocab, n))?;
    }
    f.flush()?;
    Ok(())
}

/// Distinct queries appearing in `triples`.
pub fn triple_queries(triples: &[TripletExample]) -> BTreeSet<usize> {
    triples.iter().map(|t| t.query).collect()
}
