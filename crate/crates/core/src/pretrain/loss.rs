use seedenc_tensor::{Scalar, Tape, Var};

use crate::model::{decoder_forward, encoder_forward, mlm_logits, BoundParams, EncoderOutput, Mode, ModelConfig};
use crate::text::{MaskedBatch, IGNORE_INDEX, PAD};
use crate::{Error, Result};

/// Scalar loss nodes of one pretraining step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mlm: Var,
    pub dec: Var,
}

/// Mean cross-entropy over masked positions only.
pub fn mlm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    batch: &MaskedBatch,
    enc: &EncoderOutput,
) -> Result<Var> {
    let positions = batch.masked_positions();
    if positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let labels: Vec<i64> = positions.iter().map(|&i| batch.mlm_labels[i]).collect();
    let logits = mlm_logits(tape, cfg, p, enc, &positions)?;
    Ok(tape.cross_entropy(logits, &labels, IGNORE_INDEX)?)
}

/// Decoder targets `x_1 .. x_n` of the original (unmasked) rows, with PAD
/// mapped to the ignore label.
pub fn decoder_targets(batch: &MaskedBatch) -> Result<(Vec<u32>, Vec<i64>)> {
    let n = batch.seq_len.saturating_sub(1);
    if n == 0 {
        return Err(Error::Contract("batch has no tokens after CLS to reconstruct".into()));
    }
    let mut ids = Vec::with_capacity(batch.batch * n);
    for b in 0..batch.batch {
        ids.extend_from_slice(&batch.original_ids[b * batch.seq_len + 1..(b + 1) * batch.seq_len]);
    }
    let labels = ids
        .iter()
        .map(|&t| if t == PAD { IGNORE_INDEX } else { t as i64 })
        .collect();
    Ok((ids, labels))
}

/// Mean per-token negative log-likelihood of the original tokens under the
/// decoder conditioned on `h0` and its restricted context.
pub fn weak_decoder_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    batch: &MaskedBatch,
    h0: Var,
    mode: Mode,
) -> Result<Var> {
    let (ids, labels) = decoder_targets(batch)?;
    let out = decoder_forward(tape, cfg, p, h0, &ids, batch.batch, mode)?;
    Ok(tape.cross_entropy(out.logits, &labels, IGNORE_INDEX)?)
}

/// `total = mlm + decoder_weight * dec`, from one encoder pass over the
/// masked input. With `decoder_weight == 0` the decoder loss is still
/// computed for logging but does not feed `total`.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    batch: &MaskedBatch,
    decoder_weight: f64,
    mode: Mode,
) -> Result<LossParts> {
    let enc = encoder_forward(
        tape,
        cfg,
        p,
        &batch.input_ids,
        &batch.attention_valid,
        batch.batch,
        mode,
    )?;
    let mlm = mlm_loss(tape, cfg, p, batch, &enc)?;
    let h0 = enc.h0(tape)?;
    let dec = weak_decoder_loss(tape, cfg, p, batch, h0, mode.fork(1))?;
    let total = if decoder_weight == 0.0 {
        mlm
    } else if decoder_weight == 1.0 {
        tape.add(mlm, dec)?
    } else {
        let w = tape.scale(dec, decoder_weight)?;
        tape.add(mlm, w)?
    };
    Ok(LossParts { total, mlm, dec })
}
