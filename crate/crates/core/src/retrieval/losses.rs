use seedenc_tensor::{Scalar, Tape, Var};

use super::encode::Metric;
use crate::{Error, Result};

/// `relu(1 - (s_pos - s_neg))`.
pub fn triplet_loss(s_pos: f64, s_neg: f64) -> f64 {
    (1.0 - (s_pos - s_neg)).max(0.0)
}

/// Row-wise scores of matching rows of `q` and `d` (`[B, dim]` each) -> `[B]`.
pub fn pair_scores<T: Scalar>(tape: &mut Tape<T>, q: Var, d: Var, metric: Metric) -> Result<Var> {
    let (q, d) = match metric {
        Metric::Dot => (q, d),
        Metric::Cosine => (tape.l2_normalize(q)?, tape.l2_normalize(d)?),
    };
    Ok(tape.row_dot(q, d)?)
}

/// Mean triplet loss over a batch of score pairs `[B]`.
pub fn triplet_loss_batch<T: Scalar>(tape: &mut Tape<T>, s_pos: Var, s_neg: Var) -> Result<Var> {
    let gap = tape.sub(s_pos, s_neg)?;
    let neg_gap = tape.scale(gap, -1.0)?;
    let hinge = tape.add_scalar(neg_gap, 1.0)?;
    let hinge = tape.relu(hinge)?;
    Ok(tape.mean(hinge)?)
}

/// Softmax cross-entropy of each query against all `B` documents of the
/// batch (dot scores), where document `i` is the positive of query `i`.
pub fn in_batch_negative_loss<T: Scalar>(tape: &mut Tape<T>, q: Var, d: Var) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 2 || tape.shape(d) != shape.as_slice() {
        return Err(Error::Tensor(seedenc_tensor::TensorError::Shape {
            op: "in_batch_negative_loss",
            lhs: shape,
            rhs: tape.shape(d).to_vec(),
        }));
    }
    let (b, dim) = (shape[0], shape[1]);
    if b < 2 {
        return Err(Error::DegenerateBatch(format!(
            "in-batch negatives need at least 2 pairs, got {b}"
        )));
    }
    let q3 = tape.reshape(q, &[1, b, dim])?;
    let d3 = tape.reshape(d, &[1, b, dim])?;
    let scores = tape.batched_matmul(q3, d3, true)?;
    let targets: Vec<i64> = (0..b as i64).collect();
    Ok(tape.cross_entropy(scores, &targets, -1)?)
}
