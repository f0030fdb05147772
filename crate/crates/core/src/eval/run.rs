use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRun {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

/// Ranked results per query, in query order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunResult {
    pub queries: Vec<QueryRun>,
}

impl RunResult {
    pub fn get(&self, query_id: &str) -> Option<&QueryRun> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    /// Checks scores are non-increasing with ascending-id ties.
    pub fn is_well_ordered(&self) -> bool {
        self.queries.iter().all(|q| {
            q.hits.windows(2).all(|w| {
                w[0].score > w[1].score || (w[0].score == w[1].score && w[0].doc_id < w[1].doc_id)
            })
        })
    }
}

/// `query_id Q0 doc_id rank score tag` lines, ranks from 1.
pub fn write_trec_run(path: &Path, run: &RunResult, tag: &str) -> Result<()> {
    if tag.is_empty() || tag.contains(char::is_whitespace) {
        return Err(Error::Data(format!("run tag {tag:?} must be a non-empty word")));
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for q in &run.queries {
        for (r, h) in q.hits.iter().enumerate() {
            writeln!(f, "{} Q0 {} {} {:e} {tag}", q.query_id, h.doc_id, r + 1, h.score)?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_trec_run(path: &Path) -> Result<RunResult> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<(usize, Hit)>> = BTreeMap::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: malformed run line", path.display(), n + 1));
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [q, _, d, rank, score, _] = cols[..] else {
            return Err(bad());
        };
        let rank: usize = rank.parse().map_err(|_| bad())?;
        let score: f64 = score.parse().map_err(|_| bad())?;
        if !rows.contains_key(q) {
            order.push(q.to_string());
        }
        rows.entry(q.to_string()).or_default().push((
            rank,
            Hit {
                doc_id: d.to_string(),
                score,
            },
        ));
    }
    let queries = order
        .into_iter()
        .map(|q| {
            let mut hits = rows.remove(&q).unwrap_or_default();
            hits.sort_by_key(|(r, _)| *r);
            QueryRun {
                query_id: q,
                hits: hits.into_iter().map(|(_, h)| h).collect(),
            }
        })
        .collect();
    Ok(RunResult { queries })
}
