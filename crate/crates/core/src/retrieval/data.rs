use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::text::{tokenize, TokenSequence, Vocabulary};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
}

/// Query id to the set of relevant document ids.
pub type Qrels = BTreeMap<String, BTreeSet<String>>;

/// Documents, queries and relevance judgements over them.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RetrievalDataset {
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

fn check_unique<'a>(kind: &str, ids: impl Iterator<Item = &'a str>) -> Result<HashSet<&'a str>> {
    let mut seen = HashSet::new();
    for id in ids {
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::Data(format!("{kind} id {id:?} is empty or contains whitespace")));
        }
        if !seen.insert(id) {
            return Err(Error::Data(format!("duplicate {kind} id {id:?}")));
        }
    }
    Ok(seen)
}

impl RetrievalDataset {
    /// Checks id uniqueness, that every qrel references known ids, and that
    /// every query has at least one relevant document.
    pub fn validate(&self) -> Result<()> {
        let docs = check_unique("document", self.documents.iter().map(|d| d.id.as_str()))?;
        let queries = check_unique("query", self.queries.iter().map(|q| q.id.as_str()))?;
        for (q, rel) in &self.qrels {
            if !queries.contains(q.as_str()) {
                return Err(Error::Data(format!("qrels reference unknown query {q:?}")));
            }
            if let Some(d) = rel.iter().find(|d| !docs.contains(d.as_str())) {
                return Err(Error::Data(format!("qrels for {q:?} reference unknown document {d:?}")));
            }
        }
        let missing: Vec<String> = self
            .queries
            .iter()
            .filter(|q| self.qrels.get(&q.id).is_none_or(BTreeSet::is_empty))
            .map(|q| q.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingQrels(missing));
        }
        Ok(())
    }

    /// Loads `collection.tsv`, `queries.tsv` and `qrels.tsv` style files.
    pub fn load(collection: &Path, queries: &Path, qrels: &Path) -> Result<Self> {
        let data = RetrievalDataset {
            documents: read_pairs(collection)?
                .into_iter()
                .map(|(id, text)| Document { id, text })
                .collect(),
            queries: read_pairs(queries)?
                .into_iter()
                .map(|(id, text)| Query { id, text })
                .collect(),
            qrels: read_qrels(qrels)?,
        };
        data.validate()?;
        Ok(data)
    }

    /// Tokenizes every document and query against `vocab`.
    pub fn tokenize(&self, vocab: &Vocabulary, max_query_len: usize, max_doc_len: usize) -> TokenizedDataset {
        TokenizedDataset {
            doc_ids: self.documents.iter().map(|d| d.id.clone()).collect(),
            docs: self
                .documents
                .iter()
                .map(|d| tokenize(&d.text, vocab, max_doc_len))
                .collect(),
            query_ids: self.queries.iter().map(|q| q.id.clone()).collect(),
            queries: self
                .queries
                .iter()
                .map(|q| tokenize(&q.text, vocab, max_query_len))
                .collect(),
            qrels: self.qrels.clone(),
        }
    }

    pub fn document_text(&self) -> HashMap<&str, &str> {
        self.documents.iter().map(|d| (d.id.as_str(), d.text.as_str())).collect()
    }

    pub fn query_text(&self) -> HashMap<&str, &str> {
        self.queries.iter().map(|q| (q.id.as_str(), q.text.as_str())).collect()
    }
}

/// A dataset in token space, indexed by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedDataset {
    pub doc_ids: Vec<String>,
    pub docs: Vec<TokenSequence>,
    pub query_ids: Vec<String>,
    pub queries: Vec<TokenSequence>,
    pub qrels: Qrels,
}

impl TokenizedDataset {
    /// Indices of documents relevant to query `q`.
    pub fn relevant(&self, q: usize) -> Vec<usize> {
        let Some(rel) = self.qrels.get(&self.query_ids[q]) else {
            return Vec::new();
        };
        self.doc_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| rel.contains(*id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_relevant(&self, q: usize, doc: usize) -> bool {
        self.qrels
            .get(&self.query_ids[q])
            .is_some_and(|r| r.contains(&self.doc_ids[doc]))
    }

    /// Copy restricted to the queries at `indices`; documents are kept.
    pub fn with_queries(&self, indices: &[usize]) -> TokenizedDataset {
        let query_ids: Vec<String> = indices.iter().map(|&i| self.query_ids[i].clone()).collect();
        TokenizedDataset {
            doc_ids: self.doc_ids.clone(),
            docs: self.docs.clone(),
            queries: indices.iter().map(|&i| self.queries[i].clone()).collect(),
            qrels: query_ids
                .iter()
                .filter_map(|q| self.qrels.get(q).map(|r| (q.clone(), r.clone())))
                .collect(),
            query_ids,
        }
    }
}

fn clean(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Reads `id<TAB>text` lines.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let (id, text) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{n}: expected id<TAB>text", path.display())))?;
            Ok((id.trim().to_string(), text.to_string()))
        })
        .collect()
}

/// Writes `id<TAB>text` lines; whitespace inside text is collapsed.
pub fn write_pairs<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for (id, text) in rows {
        writeln!(f, "{id}\t{}", clean(text))?;
    }
    f.flush()?;
    Ok(())
}

/// Reads `query_id<TAB>doc_id` lines.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (n, line) in lines(path)? {
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(q), Some(d), None) if !q.trim().is_empty() && !d.trim().is_empty() => {
                qrels.entry(q.trim().to_string()).or_default().insert(d.trim().to_string());
            }
            _ => return Err(Error::Data(format!("{}:{n}: expected query_id<TAB>doc_id", path.display()))),
        }
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for (q, docs) in qrels {
        for d in docs {
            writeln!(f, "{q}\t{d}")?;
        }
    }
    f.flush()?;
    Ok(())
}
