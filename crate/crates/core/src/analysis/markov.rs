use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ROW_TOL: f64 = 1e-9;
const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITERS: usize = 200_000;

/// One transition table, selected once per sequence with probability `weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicTable {
    pub weight: f64,
    /// `rows[s][y]`: probability of symbol `y` after context state `s`,
    /// where `s` encodes the previous `order` symbols in base `vocab`
    /// (oldest most significant).
    pub rows: Vec<Vec<f64>>,
}

/// Order-`order` Markov source over `vocab` symbols, optionally mixed over
/// latent topics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    pub order: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub topics: Vec<TopicTable>,
}

/// Sequences of symbols in `0..vocab` and the topic each was drawn from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkovCorpus {
    pub sequences: Vec<Vec<usize>>,
    pub topics: Vec<usize>,
}

fn entropy_of(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

fn sample(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, &p) in row.iter().enumerate() {
        u -= p;
        if u < 0.0 {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl MarkovSpec {
    pub fn num_states(&self) -> usize {
        self.vocab.pow(self.order as u32)
    }

    pub fn num_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.vocab == 0 || self.order == 0 {
            return fail("order and vocab must be positive".into());
        }
        if self.vocab.checked_pow(self.order as u32).is_none_or(|s| s > 1 << 20) {
            return fail(format!("state space {}^{} is too large", self.vocab, self.order));
        }
        if self.seq_len <= self.order {
            return fail(format!("seq_len {} must exceed order {}", self.seq_len, self.order));
        }
        if self.topics.is_empty() {
            return fail("at least one topic table is required".into());
        }
        let total: f64 = self.topics.iter().map(|t| t.weight).sum();
        if self.topics.iter().any(|t| !(t.weight >= 0.0)) || (total - 1.0).abs() > ROW_TOL {
            return fail(format!("topic weights must be non-negative and sum to 1, got {total}"));
        }
        for (z, t) in self.topics.iter().enumerate() {
            if t.rows.len() != self.num_states() {
                return fail(format!("topic {z}: {} rows, expected {}", t.rows.len(), self.num_states()));
            }
            for (s, row) in t.rows.iter().enumerate() {
                if row.len() != self.vocab {
                    return fail(format!("topic {z} row {s}: {} entries, expected {}", row.len(), self.vocab));
                }
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                    return fail(format!("topic {z} row {s} is not a probability distribution (sum {sum})"));
                }
            }
        }
        Ok(())
    }

    /// Same next-symbol distribution `row` in every state.
    pub fn iid(row: Vec<f64>, order: usize, seq_len: usize) -> Self {
        let vocab = row.len();
        MarkovSpec {
            order,
            vocab,
            seq_len,
            topics: vec![TopicTable {
                weight: 1.0,
                rows: vec![row; vocab.pow(order as u32)],
            }],
        }
    }

    pub fn uniform(vocab: usize, order: usize, seq_len: usize) -> Self {
        Self::iid(vec![1.0 / vocab as f64; vocab], order, seq_len)
    }

    /// Single-topic chain from explicit rows.
    pub fn from_rows(order: usize, rows: Vec<Vec<f64>>, seq_len: usize) -> Self {
        MarkovSpec {
            order,
            vocab: rows.first().map_or(0, Vec::len),
            seq_len,
            topics: vec![TopicTable { weight: 1.0, rows }],
        }
    }

    /// Random chain: in every state of every topic, `support` successors
    /// chosen at random share the mass with random (Dirichlet(1)) weights.
    pub fn random(topics: usize, vocab: usize, order: usize, support: usize, seq_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = vocab.pow(order as u32);
        let support = support.clamp(1, vocab);
        let tables = (0..topics)
            .map(|_| {
                let rows = (0..states)
                    .map(|_| {
                        let mut row = vec![0.0; vocab];
                        let picks = rand::seq::index::sample(&mut rng, vocab, support);
                        let w: Vec<f64> = (0..support).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
                        let total: f64 = w.iter().sum();
                        for (i, y) in picks.into_iter().enumerate() {
                            row[y] = w[i] / total;
                        }
                        row
                    })
                    .collect();
                TopicTable {
                    weight: 1.0 / topics as f64,
                    rows,
                }
            })
            .collect();
        MarkovSpec {
            order,
            vocab,
            seq_len,
            topics: tables,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: MarkovSpec = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    fn next_state(&self, s: usize, y: usize) -> usize {
        (s * self.vocab + y) % self.num_states()
    }

    /// Context state of the `order` symbols ending just before position `t`.
    pub fn state_before(&self, seq: &[usize], t: usize) -> usize {
        seq[t - self.order..t].iter().fold(0, |s, &y| s * self.vocab + y)
    }

    /// `-ln P(x_t | x_{t-order..t}, topic)` for `t >= order`.
    pub fn surprisal(&self, seq: &[usize], topic: usize, t: usize) -> f64 {
        -self.topics[topic].rows[self.state_before(seq, t)][seq[t]].ln()
    }
}

/// Stationary distribution over context states of one topic table.
#[derive(Clone, Debug, PartialEq)]
pub struct Stationary {
    pub pi: Vec<f64>,
    /// Whether every start state converged to the same distribution.
    pub unique: bool,
}

fn power_iterate(spec: &MarkovSpec, rows: &[Vec<f64>], start: Vec<f64>) -> Vec<f64> {
    // Lazy chain (I + P) / 2: same fixed points, no periodicity.
    let mut pi = start;
    for _ in 0..POWER_MAX_ITERS {
        let mut next: Vec<f64> = pi.iter().map(|p| 0.5 * p).collect();
        for (s, &p) in pi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (y, &q) in rows[s].iter().enumerate() {
                if q > 0.0 {
                    next[spec.next_state(s, y)] += 0.5 * p * q;
                }
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < POWER_TOL {
            break;
        }
    }
    pi
}

/// Power iteration from the uniform distribution, plus a uniqueness check
/// from point masses on (up to 64) individual states.
pub fn stationary_distribution(spec: &MarkovSpec, topic: usize) -> Result<Stationary> {
    spec.validate()?;
    let rows = &spec.topics[topic].rows;
    let n = spec.num_states();
    let pi = power_iterate(spec, rows, vec![1.0 / n as f64; n]);
    let step = (n / 64).max(1);
    let unique = (0..n).step_by(step).all(|s| {
        let mut start = vec![0.0; n];
        start[s] = 1.0;
        let other = power_iterate(spec, rows, start);
        other.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum::<f64>() < 1e-6
    });
    Ok(Stationary { pi, unique })
}

/// Samples `num_sequences` sequences: a topic from the topic weights, the
/// first `order` symbols from that topic's stationary distribution, then
/// the chain.
pub fn generate_markov_corpus(spec: &MarkovSpec, num_sequences: usize, seed: u64) -> Result<MarkovCorpus> {
    spec.validate()?;
    let stationary: Vec<Vec<f64>> = (0..spec.num_topics())
        .map(|z| stationary_distribution(spec, z).map(|s| s.pi))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = spec.topics.iter().map(|t| t.weight).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = MarkovCorpus {
        sequences: Vec::with_capacity(num_sequences),
        topics: Vec::with_capacity(num_sequences),
    };
    for _ in 0..num_sequences {
        let z = sample(&weights, &mut rng);
        let mut state = sample(&stationary[z], &mut rng);
        let mut seq = Vec::with_capacity(spec.seq_len);
        let mut digits = vec![0; spec.order];
        for d in digits.iter_mut().rev() {
            *d = state % spec.vocab;
            state /= spec.vocab;
        }
        seq.extend(digits);
        while seq.len() < spec.seq_len {
            let s = spec.state_before(&seq, seq.len());
            seq.push(sample(&spec.topics[z].rows[s], &mut rng));
        }
        corpus.sequences.push(seq);
        corpus.topics.push(z);
    }
    Ok(corpus)
}

/// Per-token entropy floor `H(X_t | X_{<t}, z)` in nats, for `t >= order`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyFloor {
    pub nats: f64,
    /// False when some topic chain has several stationary distributions; the
    /// value then weights states by empirical frequency in a seeded sample.
    pub ergodic: bool,
}

pub fn exact_conditional_entropy(spec: &MarkovSpec) -> Result<EntropyFloor> {
    spec.validate()?;
    let mut h = 0.0;
    let mut ergodic = true;
    for (z, table) in spec.topics.iter().enumerate() {
        let st = stationary_distribution(spec, z)?;
        let weights = if st.unique {
            st.pi
        } else {
            log::warn!("topic {z}: chain has several stationary distributions; using empirical state frequencies");
            ergodic = false;
            empirical_state_frequencies(spec, z)?
        };
        let hz: f64 = weights.iter().zip(&table.rows).map(|(p, row)| p * entropy_of(row)).sum();
        h += table.weight * hz;
    }
    Ok(EntropyFloor { nats: h, ergodic })
}

fn empirical_state_frequencies(spec: &MarkovSpec, topic: usize) -> Result<Vec<f64>> {
    let single = MarkovSpec {
        topics: vec![TopicTable {
            weight: 1.0,
            rows: spec.topics[topic].rows.clone(),
        }],
        ..spec.clone()
    };
    let corpus = generate_markov_corpus(&single, 2_000, 0x5eed)?;
    let mut counts = vec![0.0; spec.num_states()];
    let mut total = 0.0;
    for seq in &corpus.sequences {
        for t in spec.order..seq.len() {
            counts[spec.state_before(seq, t)] += 1.0;
            total += 1.0;
        }
    }
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Monte-Carlo estimate of the entropy floor from the true conditionals:
/// mean surprisal over positions `t >= order` and its standard error over
/// sequences.
pub fn monte_carlo_entropy(spec: &MarkovSpec, corpus: &MarkovCorpus) -> Result<(f64, f64)> {
    let per_seq: Vec<f64> = corpus
        .sequences
        .iter()
        .zip(&corpus.topics)
        .map(|(seq, &z)| {
            let n = seq.len() - spec.order;
            (spec.order..seq.len()).map(|t| spec.surprisal(seq, z, t)).sum::<f64>() / n as f64
        })
        .collect();
    mean_and_se(&per_seq)
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InsufficientSample {
            got: values.len(),
            need: 2,
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
