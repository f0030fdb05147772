//! Synthetic topical retrieval data.
//!
//! Words come in three families: function words `f<i>` that follow a sparse
//! Markov grammar, topic words `t<z>w<i>`, and subtopic words `s<z>v<j>w<i>`.
//! A document belongs to one subtopic and draws its content words from a
//! small document-specific subset of that subtopic's and topic's words, so
//! content repeats within a document. A query is a handful of words from
//! its subtopic; every labeled document of the subtopic is relevant.
//! Train and dev queries come from disjoint topics.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Document, Qrels, Query, RetrievalDataset};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    pub num_topics: usize,
    pub subtopics_per_topic: usize,
    /// Labeled documents per subtopic (the retrieval collection).
    pub docs_per_subtopic: usize,
    /// Additional unlabeled documents per subtopic, used only for pretraining.
    pub extra_pretrain_docs_per_subtopic: usize,
    pub function_words: usize,
    pub topic_words: usize,
    pub subtopic_words: usize,
    /// Distinct content words a single document draws from.
    pub doc_focus_words: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    /// Probability that a slot holds a content word.
    pub content_rate: f64,
    /// Share of content drawn from the subtopic (rest from the topic).
    pub subtopic_share: f64,
    pub query_len_min: usize,
    pub query_len_max: usize,
    pub queries_per_subtopic: usize,
    /// Fraction of topics whose queries form the dev split.
    pub dev_topic_fraction: f64,
    /// Extra dev queries per subtopic of the remaining (train) topics.
    pub dev_queries_per_subtopic: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            num_topics: 16,
            subtopics_per_topic: 3,
            docs_per_subtopic: 10,
            extra_pretrain_docs_per_subtopic: 20,
            function_words: 24,
            topic_words: 8,
            subtopic_words: 6,
            doc_focus_words: 5,
            doc_len_min: 20,
            doc_len_max: 40,
            content_rate: 0.4,
            subtopic_share: 0.6,
            query_len_min: 3,
            query_len_max: 5,
            queries_per_subtopic: 4,
            dev_topic_fraction: 0.375,
            dev_queries_per_subtopic: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("toy data: {m}")));
        if self.num_topics < 2 || self.subtopics_per_topic == 0 || self.docs_per_subtopic == 0 {
            return fail("need at least 2 topics, 1 subtopic and 1 document per subtopic");
        }
        if self.function_words < 2 || self.topic_words == 0 || self.subtopic_words == 0 {
            return fail("word families must be non-empty");
        }
        if self.doc_focus_words == 0 || self.doc_len_min == 0 || self.doc_len_min > self.doc_len_max {
            return fail("need 0 < doc_len_min <= doc_len_max and doc_focus_words > 0");
        }
        if self.query_len_min == 0 || self.query_len_min > self.query_len_max || self.queries_per_subtopic == 0 {
            return fail("need 0 < query_len_min <= query_len_max and queries_per_subtopic > 0");
        }
        for (name, v) in [
            ("content_rate", self.content_rate),
            ("subtopic_share", self.subtopic_share),
            ("dev_topic_fraction", self.dev_topic_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        let dev = self.dev_topics();
        if (dev == 0 && self.dev_queries_per_subtopic == 0) || dev >= self.num_topics {
            return fail("dev_topic_fraction and dev_queries_per_subtopic must leave both splits non-empty");
        }
        Ok(())
    }

    fn dev_topics(&self) -> usize {
        (self.dev_topic_fraction * self.num_topics as f64).round() as usize
    }
}

/// Generated corpus plus train and dev retrieval splits over one collection.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyData {
    /// Pretraining documents: the collection plus the unlabeled extras.
    pub pretrain_corpus: Vec<String>,
    pub train: RetrievalDataset,
    pub dev: RetrievalDataset,
}

struct Generator<'a> {
    cfg: &'a ToyConfig,
    successors: Vec<Vec<usize>>,
}

impl Generator<'_> {
    fn topic_word(z: usize, i: usize) -> String {
        format!("t{z}w{i}")
    }

    fn subtopic_word(z: usize, s: usize, i: usize) -> String {
        format!("s{z}v{s}w{i}")
    }

    /// Zipf-weighted pick from `0..n`.
    fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
        let total: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
        let mut u = rng.random::<f64>() * total;
        for r in 1..=n {
            u -= 1.0 / r as f64;
            if u <= 0.0 {
                return r - 1;
            }
        }
        n - 1
    }

    fn content_word(&self, rng: &mut ChaCha8Rng, z: usize, s: usize) -> String {
        if rng.random::<f64>() < self.cfg.subtopic_share {
            Self::subtopic_word(z, s, Self::zipf(rng, self.cfg.subtopic_words))
        } else {
            Self::topic_word(z, Self::zipf(rng, self.cfg.topic_words))
        }
    }

    fn document(&self, rng: &mut ChaCha8Rng, z: usize, s: usize) -> String {
        let mut focus = BTreeSet::new();
        let pool = self.cfg.subtopic_words + self.cfg.topic_words;
        while focus.len() < self.cfg.doc_focus_words.min(pool) {
            focus.insert(self.content_word(rng, z, s));
        }
        let focus: Vec<String> = focus.into_iter().collect();
        let len = rng.random_range(self.cfg.doc_len_min..=self.cfg.doc_len_max);
        let mut state = rng.random_range(0..self.cfg.function_words);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.random::<f64>() < self.cfg.content_rate {
                words.push(focus.choose(rng).unwrap().clone());
            } else {
                state = *self.successors[state].choose(rng).unwrap();
                words.push(format!("f{state}"));
            }
        }
        words.join(" ")
    }

    fn query(&self, rng: &mut ChaCha8Rng, z: usize, s: usize) -> String {
        let len = rng.random_range(self.cfg.query_len_min..=self.cfg.query_len_max);
        (0..len).map(|_| self.content_word(rng, z, s)).collect::<Vec<_>>().join(" ")
    }
}

/// Deterministic in `cfg` (including its seed).
pub fn generate_toy_data(cfg: &ToyConfig) -> Result<ToyData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let successors = (0..cfg.function_words)
        .map(|_| {
            let mut all: Vec<usize> = (0..cfg.function_words).collect();
            all.shuffle(&mut rng);
            all.truncate(3.min(cfg.function_words));
            all
        })
        .collect();
    let generator = Generator { cfg, successors };
    let mut topics: Vec<usize> = (0..cfg.num_topics).collect();
    topics.shuffle(&mut rng);
    let dev_topics: BTreeSet<usize> = topics[..cfg.dev_topics()].iter().copied().collect();

    let mut documents = Vec::new();
    let mut extra = Vec::new();
    let (mut train, mut dev) = (RetrievalDataset::default(), RetrievalDataset::default());
    for z in 0..cfg.num_topics {
        for s in 0..cfg.subtopics_per_topic {
            let mut rel = BTreeSet::new();
            for i in 0..cfg.docs_per_subtopic {
                let id = format!("d{z}-{s}-{i}");
                rel.insert(id.clone());
                documents.push(Document {
                    id,
                    text: generator.document(&mut rng, z, s),
                });
            }
            for _ in 0..cfg.extra_pretrain_docs_per_subtopic {
                extra.push(generator.document(&mut rng, z, s));
            }
            let held_out = dev_topics.contains(&z);
            let extra_dev = if held_out { 0 } else { cfg.dev_queries_per_subtopic };
            for i in 0..cfg.queries_per_subtopic + extra_dev {
                let split = if held_out || i >= cfg.queries_per_subtopic { &mut dev } else { &mut train };
                let id = format!("q{z}-{s}-{i}");
                split.qrels.insert(id.clone(), rel.clone());
                split.queries.push(Query {
                    id,
                    text: generator.query(&mut rng, z, s),
                });
            }
        }
    }
    let mut pretrain_corpus: Vec<String> = documents.iter().map(|d| d.text.clone()).chain(extra).collect();
    pretrain_corpus.shuffle(&mut rng);
    train.documents = documents.clone();
    dev.documents = documents;
    train.validate()?;
    dev.validate()?;
    Ok(ToyData {
        pretrain_corpus,
        train,
        dev,
    })
}

/// Merges the qrels of both splits, e.g. for writing one qrels file.
pub fn merged_qrels(a: &RetrievalDataset, b: &RetrievalDataset) -> Qrels {
    a.qrels.iter().chain(&b.qrels).map(|(k, v)| (k.clone(), v.clone())).collect()
}
