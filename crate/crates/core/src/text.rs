//! Corpus ingestion, vocabulary, tokenization and masked-LM batches.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_RESERVED: usize = 5;
/// Label value for positions that carry no MLM target.
pub const IGNORE_INDEX: i64 = -100;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Lowercased whitespace tokens, with every ASCII punctuation character
/// split off as its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in id order (id 5 first).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = HashMap::new();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Ingestion(format!("invalid vocabulary token {tok:?}")));
            }
            if RESERVED_NAMES.contains(&tok.as_str()) || index.contains_key(&tok) {
                return Err(Error::Ingestion(format!("duplicate vocabulary token {tok:?}")));
            }
            index.insert(tok.clone(), all.len() as u32);
            all.push(tok);
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// One token per line; line `i` holds id `i + 5`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for tok in self.entries() {
            writeln!(f, "{tok}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut toks = Vec::new();
        for line in f.lines() {
            toks.push(line?);
        }
        Self::from_tokens(toks)
    }
}

/// Counts tokens over `docs` and keeps the `max_size - 5` most frequent with
/// frequency at least `min_freq`; ties break lexicographically.
pub fn build_vocab<I, S>(docs: I, max_size: usize, min_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size < NUM_RESERVED {
        return Err(Error::Config(format!("max vocabulary size {max_size} is below the 5 reserved ids")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut n_docs = 0usize;
    for doc in docs {
        n_docs += 1;
        for tok in split_words(doc.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if n_docs == 0 || counts.is_empty() {
        return Err(Error::Ingestion("empty corpus".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED_NAMES.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// Token ids with [`CLS`] at position 0 and no padding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Contract("token sequence must start with CLS".into()));
        }
        if ids[1..].contains(&PAD) {
            return Err(Error::Contract("token sequence must not contain PAD".into()));
        }
        Ok(TokenSequence(ids))
    }

    /// `[CLS] ++ words`, for callers that already hold word ids.
    pub fn from_words(words: &[u32]) -> Result<Self> {
        let mut ids = Vec::with_capacity(words.len() + 1);
        ids.push(CLS);
        ids.extend_from_slice(words);
        Self::new(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    /// Ids after the CLS slot.
    pub fn words(&self) -> &[u32] {
        &self.0[1..]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn truncated(&self, max_len: usize) -> TokenSequence {
        TokenSequence(self.0[..self.0.len().min(max_len.max(1))].to_vec())
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids = vec![CLS];
    for w in split_words(text) {
        if ids.len() >= max_len.max(2) {
            break;
        }
        ids.push(vocab.id(&w));
    }
    TokenSequence(ids)
}

/// Reads a corpus file: UTF-8, one document per line (blank lines skipped).
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut docs = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            docs.push(line);
        }
    }
    if docs.is_empty() {
        return Err(Error::Ingestion(format!("{} contains no documents", path.display())));
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in docs {
        writeln!(f, "{d}")?;
    }
    f.flush()?;
    Ok(())
}

/// Replacement policy for masked-LM selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub mask_rate: f64,
    /// Fraction of selected positions replaced by [`MASK`].
    pub mask_token_frac: f64,
    /// Fraction of selected positions replaced by a uniform random token;
    /// the remainder keep their original token.
    pub random_token_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_rate: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} must lie in (0, 1)", self.mask_rate)));
        }
        let split_ok = self.mask_token_frac >= 0.0
            && self.random_token_frac >= 0.0
            && self.mask_token_frac + self.random_token_frac <= 1.0;
        if !split_ok {
            return Err(Error::Config("masking split fractions must be non-negative and sum to at most 1".into()));
        }
        Ok(())
    }
}

/// Row-major `[batch, seq_len]` masked-LM batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub input_ids: Vec<u32>,
    pub original_ids: Vec<u32>,
    pub mlm_labels: Vec<i64>,
    pub attention_valid: Vec<bool>,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.mlm_labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    /// Flat indices (into `batch * seq_len`) of positions carrying a label.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.mlm_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE_INDEX)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Pads sequences to the longest one; returns `(ids, valid, seq_len)`.
pub fn pad_sequences(seqs: &[TokenSequence]) -> (Vec<u32>, Vec<bool>, usize) {
    let len = seqs.iter().map(TokenSequence::len).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut valid = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        ids.extend_from_slice(s.ids());
        valid.extend(std::iter::repeat_n(true, s.len()));
        ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        valid.extend(std::iter::repeat_n(false, len - s.len()));
    }
    (ids, valid, len)
}

/// Pads `sequences` and selects each non-CLS, non-PAD position
/// independently with probability `mask_rate`.
pub fn create_mlm_batch(
    sequences: &[TokenSequence],
    vocab_size: usize,
    cfg: &MaskingConfig,
    seed: u64,
) -> Result<MaskedBatch> {
    cfg.validate()?;
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Config("vocabulary has no non-reserved tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (original_ids, attention_valid, seq_len) = pad_sequences(sequences);
    let mut input_ids = original_ids.clone();
    let mut mlm_labels = vec![IGNORE_INDEX; original_ids.len()];
    for i in 0..original_ids.len() {
        let eligible = i % seq_len != 0 && attention_valid[i];
        if !eligible || rng.random::<f64>() >= cfg.mask_rate {
            continue;
        }
        mlm_labels[i] = original_ids[i] as i64;
        let r: f64 = rng.random();
        if r < cfg.mask_token_frac {
            input_ids[i] = MASK;
        } else if r < cfg.mask_token_frac + cfg.random_token_frac {
            input_ids[i] = rng.random_range(NUM_RESERVED as u32..vocab_size as u32);
        }
    }
    Ok(MaskedBatch {
        batch: sequences.len(),
        seq_len,
        input_ids,
        original_ids,
        mlm_labels,
        attention_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(split_words("Hello, World!  a-b"), vec!["hello", ",", "world", "!", "a", "-", "b"]);
    }

    #[test]
    fn small_vocab() {
        let v = build_vocab(["a b a"], 7, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn min_freq_filters_to_unk() {
        let v = build_vocab(["a b a"], 10, 2).unwrap();
        assert!(!v.contains("b"));
        assert_eq!(tokenize("b", &v, 8).ids(), &[CLS, UNK]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(build_vocab(Vec::<String>::new(), 10, 1), Err(Error::Ingestion(_))));
        assert!(matches!(build_vocab(["   "], 10, 1), Err(Error::Ingestion(_))));
    }

    #[test]
    fn tokenize_examples() {
        let v = build_vocab(["a b"], 10, 1).unwrap();
        assert_eq!(tokenize("", &v, 8).ids(), &[CLS]);
        assert_eq!(tokenize("a b", &v, 8).ids(), &[CLS, v.id("a"), v.id("b")]);
        let long = vec!["a"; 600].join(" ");
        assert_eq!(tokenize(&long, &v, 128).len(), 128);
    }

    #[test]
    fn cls_only_sequence_masks_nothing() {
        let seqs = vec![TokenSequence::new(vec![CLS]).unwrap(), TokenSequence::from_words(&[7, 8]).unwrap()];
        let cfg = MaskingConfig {
            mask_rate: 0.99,
            ..MaskingConfig::default()
        };
        let b = create_mlm_batch(&seqs[..1], 10, &cfg, 1).unwrap();
        assert_eq!(b.num_masked(), 0);
        // CLS + PAD row alongside a longer row
        let b = create_mlm_batch(&seqs, 10, &cfg, 1).unwrap();
        assert_eq!(b.seq_len, 3);
        assert!(b.mlm_labels[..3].iter().all(|&l| l == IGNORE_INDEX));
    }

    #[test]
    fn token_sequence_invariants() {
        assert!(TokenSequence::new(vec![5, 6]).is_err());
        assert!(TokenSequence::new(vec![CLS, 6, PAD]).is_err());
    }
}
