use super::DecoderSpan;

/// Attention mask over decoder slots `0..=n` (slot 0 holds h_0, slot `p`
/// holds token `x_p`), row-major `[n + 1, n + 1]`.
///
/// Slot `p >= 1` may attend to slot 0 and to slots
/// `max(1, p - span) ..= p`; slot 0 attends only to itself.
pub fn build_decoder_mask(n: usize, span: DecoderSpan) -> Vec<bool> {
    let size = n + 1;
    let mut mask = vec![false; size * size];
    for p in 0..size {
        mask[p * size] = true;
        if p == 0 {
            continue;
        }
        let start = match span {
            DecoderSpan::All => 1,
            DecoderSpan::Window(k) => p.saturating_sub(k).max(1),
        };
        for q in start..=p {
            mask[p * size + q] = true;
        }
    }
    mask
}

/// Slots visible from slot `p`, in ascending order.
pub fn attend_set(mask: &[bool], n: usize, p: usize) -> Vec<usize> {
    let size = n + 1;
    (0..size).filter(|&q| mask[p * size + q]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        let m = build_decoder_mask(5, DecoderSpan::Window(2));
        assert_eq!(attend_set(&m, 5, 4), vec![0, 2, 3, 4]);
        assert_eq!(attend_set(&m, 5, 1), vec![0, 1]);
        assert_eq!(attend_set(&m, 5, 0), vec![0]);
        let all = build_decoder_mask(5, DecoderSpan::All);
        assert_eq!(attend_set(&all, 5, 3), vec![0, 1, 2, 3]);
    }
}
