use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedenc_tensor::Tape;

use crate::model::{decoder_forward, encoder_forward, Mode, ModelConfig, ParamStore, DECODER_PREFIX};
use crate::retrieval::{encode_all, similarity, Metric};
use crate::text::TokenSequence;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityRow {
    /// Words per sequence after truncation (CLS excluded).
    pub length: usize,
    pub mean: f64,
    pub std: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityProfile {
    pub rows: Vec<DiversityRow>,
    /// Cosine of one sequence with itself; 1 up to rounding.
    pub self_cosine: f64,
}

/// Mean pairwise CLS cosine of random pairs of distinct documents, per
/// truncation length. Only documents with at least `length` words enter a
/// bucket; buckets with fewer than two are skipped.
pub fn cls_diversity_profile(
    cfg: &ModelConfig,
    params: &ParamStore,
    corpus: &[TokenSequence],
    lengths: &[usize],
    pairs_per_length: usize,
    seed: u64,
) -> Result<DiversityProfile> {
    if corpus.is_empty() {
        return Err(Error::Data("diversity profile needs a non-empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &length in lengths {
        let pool: Vec<TokenSequence> = corpus
            .iter()
            .filter(|s| s.words().len() >= length && length > 0 && length < cfg.max_seq_len)
            .map(|s| s.truncated(length + 1))
            .collect();
        if pool.len() < 2 {
            log::warn!("length {length}: {} eligible documents, bucket skipped", pool.len());
            continue;
        }
        let pairs: Vec<(usize, usize)> = (0..pairs_per_length)
            .map(|_| {
                let a = rng.random_range(0..pool.len());
                let mut b = rng.random_range(0..pool.len() - 1);
                if b >= a {
                    b += 1;
                }
                (a, b)
            })
            .collect();
        let emb = encode_all(cfg, params, &pool)?;
        let cos: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| similarity(&emb[a], &emb[b], Metric::Cosine))
            .collect::<Result<_>>()?;
        let n = cos.len().max(1) as f64;
        let mean = cos.iter().sum::<f64>() / n;
        let std = (cos.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
        rows.push(DiversityRow {
            length,
            mean,
            std,
            pairs: cos.len(),
        });
    }
    let e = encode_all(cfg, params, &corpus[..1])?;
    let self_cosine = similarity(&e[0], &e[0], Metric::Cosine)?;
    Ok(DiversityProfile { rows, self_cosine })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DependencyPoint {
    /// Decoder slot; slot 0 holds h_0 and slot `t` the embedding of word `t`.
    pub position: usize,
    pub mean_cosine: f64,
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DependencyCurve {
    pub points: Vec<DependencyPoint>,
    /// Cosine between the slot-0 layer input and h_0, averaged; 1 by
    /// construction.
    pub layer0_slot0: f64,
}

impl DependencyCurve {
    pub fn at(&self, position: usize) -> Option<f64> {
        self.points.iter().find(|p| p.position == position).map(|p| p.mean_cosine)
    }

    /// `max - min` over points with `position >= from`.
    pub fn range_from(&self, from: usize) -> f64 {
        let vals: Vec<f64> = self.points.iter().filter(|p| p.position >= from).map(|p| p.mean_cosine).collect();
        if vals.is_empty() {
            return 0.0;
        }
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Mean cosine between the decoder's last-layer state at each position and
/// the encoder's h_0, with both networks in eval mode. Positions at or past
/// a sequence's decoder length are skipped for that sequence.
pub fn decoder_cls_dependency(
    cfg: &ModelConfig,
    params: &ParamStore,
    corpus: &[TokenSequence],
    positions: &[usize],
) -> Result<DependencyCurve> {
    let missing: Vec<String> = crate::model::parameter_layout(cfg)
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.starts_with(DECODER_PREFIX) && !params.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    if corpus.is_empty() {
        return Err(Error::Data("dependency curve needs a non-empty corpus".into()));
    }
    let d = cfg.hidden_dim;
    let mut sums = vec![(0.0, 0usize); positions.len()];
    let mut slot0 = 0.0;
    for seq in corpus {
        let n = seq.len() - 1;
        if n == 0 {
            continue;
        }
        let mut tape = Tape::<f32>::new();
        let p = params.bind_frozen(&mut tape)?;
        let enc = encoder_forward(&mut tape, cfg, &p, seq.ids(), &vec![true; seq.len()], 1, Mode::Eval)?;
        let h0 = enc.h0(&mut tape)?;
        let out = decoder_forward(&mut tape, cfg, &p, h0, seq.words(), 1, Mode::Eval)?;
        let h0v = tape.value(h0).data().to_vec();
        let hidden = tape.value(out.hidden).data();
        for (i, &pos) in positions.iter().enumerate() {
            if pos < n {
                sums[i].0 += similarity(&hidden[pos * d..(pos + 1) * d], &h0v, Metric::Cosine)?;
                sums[i].1 += 1;
            }
        }
        slot0 += similarity(&tape.value(out.input).data()[..d], &h0v, Metric::Cosine)?;
    }
    let points = positions
        .iter()
        .zip(sums)
        .filter(|(_, (_, c))| *c > 0)
        .map(|(&position, (s, c))| DependencyPoint {
            position,
            mean_cosine: s / c as f64,
            sequences: c,
        })
        .collect();
    Ok(DependencyCurve {
        points,
        layer0_slot0: slot0 / corpus.len() as f64,
    })
}
