use std::io::{BufWriter, Write};
use std::path::Path;

use crate::retrieval::Qrels;
use crate::{Error, Result};

use super::run::RunResult;

fn judged<'a>(run: &'a RunResult, qrels: &'a Qrels, k: usize) -> Result<Vec<(&'a [super::Hit], &'a std::collections::BTreeSet<String>)>> {
    if k == 0 {
        return Err(Error::Config("metric cutoff k must be positive".into()));
    }
    let missing: Vec<String> = run
        .queries
        .iter()
        .filter(|q| qrels.get(&q.query_id).is_none_or(|r| r.is_empty()))
        .map(|q| q.query_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingQrels(missing));
    }
    Ok(run
        .queries
        .iter()
        .map(|q| (&q.hits[..k.min(q.hits.len())], &qrels[&q.query_id]))
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Reciprocal rank of the first relevant hit within the top `k`, per query.
pub fn per_query_rr(run: &RunResult, qrels: &Qrels, k: usize) -> Result<Vec<f64>> {
    Ok(judged(run, qrels, k)?
        .into_iter()
        .map(|(hits, rel)| {
            hits.iter()
                .position(|h| rel.contains(&h.doc_id))
                .map_or(0.0, |r| 1.0 / (r + 1) as f64)
        })
        .collect())
}

pub fn per_query_recall(run: &RunResult, qrels: &Qrels, k: usize) -> Result<Vec<f64>> {
    Ok(judged(run, qrels, k)?
        .into_iter()
        .map(|(hits, rel)| hits.iter().filter(|h| rel.contains(&h.doc_id)).count() as f64 / rel.len() as f64)
        .collect())
}

pub fn per_query_hit(run: &RunResult, qrels: &Qrels, k: usize) -> Result<Vec<f64>> {
    Ok(judged(run, qrels, k)?
        .into_iter()
        .map(|(hits, rel)| f64::from(u8::from(hits.iter().any(|h| rel.contains(&h.doc_id)))))
        .collect())
}

pub fn mrr_at_k(run: &RunResult, qrels: &Qrels, k: usize) -> Result<f64> {
    Ok(mean(&per_query_rr(run, qrels, k)?))
}

pub fn recall_at_k(run: &RunResult, qrels: &Qrels, k: usize) -> Result<f64> {
    Ok(mean(&per_query_recall(run, qrels, k)?))
}

pub fn hit_at_k(run: &RunResult, qrels: &Qrels, k: usize) -> Result<f64> {
    Ok(mean(&per_query_hit(run, qrels, k)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

/// `metric,k,value` CSV.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "metric,k,value")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.metric, r.k, r.value)?;
    }
    f.flush()?;
    Ok(())
}
