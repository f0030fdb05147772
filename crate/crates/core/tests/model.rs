use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedenc_core::model::{
    attend_set, build_decoder_mask, decoder_forward, encoder_forward, mlm_logits, DecoderSpan, Mode, ModelConfig,
    ParamStore,
};
use seedenc_core::text::{CLS, PAD};
use seedenc_core::Error;
use seedenc_tensor::{Tape, Tensor};

fn toy(layers: usize, dec_layers: usize, span: DecoderSpan) -> ModelConfig {
    ModelConfig {
        num_enc_layers: layers,
        num_dec_layers: dec_layers,
        hidden_dim: 32,
        num_heads: 4,
        ff_dim: 64,
        vocab_size: 60,
        max_seq_len: 20,
        dropout: 0.0,
        decoder_span: span,
        tie_decoder_embeddings: true,
        init_std: 0.1,
    }
}

fn random_rows(rng: &mut ChaCha8Rng, batch: usize, len: usize, vocab: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        ids.push(CLS);
        ids.extend((1..len).map(|_| rng.random_range(5..vocab as u32)));
    }
    ids
}

fn h0_of(cfg: &ModelConfig, params: &ParamStore, ids: &[u32], valid: &[bool], batch: usize) -> Vec<f32> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape).unwrap();
    let enc = encoder_forward(&mut tape, cfg, &p, ids, valid, batch, Mode::Eval).unwrap();
    let h0 = enc.h0(&mut tape).unwrap();
    tape.value(h0).data().to_vec()
}

fn decoder_logits(cfg: &ModelConfig, params: &ParamStore, h0: Tensor, targets: &[u32], batch: usize) -> Tensor {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape).unwrap();
    let h = tape.constant(h0).unwrap();
    let out = decoder_forward(&mut tape, cfg, &p, h, targets, batch, Mode::Eval).unwrap();
    tape.value(out.logits).clone()
}

fn logits_at(logits: &Tensor, batch: usize, slot: usize) -> Vec<f32> {
    let shape = logits.shape();
    let (n, v) = (shape[1], shape[2]);
    logits.data()[(batch * n + slot) * v..(batch * n + slot + 1) * v].to_vec()
}

#[test]
fn encoder_output_shape() {
    let cfg = toy(2, 1, DecoderSpan::Window(2));
    let params = ParamStore::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids = random_rows(&mut rng, 2, 8, cfg.vocab_size);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape).unwrap();
    let enc = encoder_forward(&mut tape, &cfg, &p, &ids, &[true; 16], 2, Mode::Eval).unwrap();
    assert_eq!(tape.shape(enc.hidden), &[2, 8, 32]);
    assert!(tape.value(enc.hidden).all_finite());
}

#[test]
fn encoder_rejects_long_and_cls_less_rows() {
    let cfg = toy(1, 1, DecoderSpan::Window(2));
    let params = ParamStore::init(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape).unwrap();
    let ids = vec![CLS; 21];
    let err = encoder_forward(&mut tape, &cfg, &p, &ids, &[true; 21], 1, Mode::Eval).unwrap_err();
    assert!(matches!(err, Error::SequenceTooLong { len: 21, max: 20 }));
    let err = encoder_forward(&mut tape, &cfg, &p, &[7, 8], &[true; 2], 1, Mode::Eval).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn pad_tail_content_does_not_change_h0() {
    let cfg = toy(2, 1, DecoderSpan::Window(2));
    let params = ParamStore::init(&cfg, 1).unwrap();
    let mut ids = vec![CLS, 10, 11, 12, 13, PAD, PAD, PAD];
    let valid = [true, true, true, true, true, false, false, false];
    let base = h0_of(&cfg, &params, &ids, &valid, 1);
    ids[5..].copy_from_slice(&[40, 7, 33]);
    assert_eq!(base, h0_of(&cfg, &params, &ids, &valid, 1));
    ids[5..].copy_from_slice(&[33, 40, 7]);
    assert_eq!(base, h0_of(&cfg, &params, &ids, &valid, 1));
}

#[test]
fn eval_forward_is_bit_identical() {
    let cfg = toy(2, 1, DecoderSpan::Window(2));
    let params = ParamStore::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = random_rows(&mut rng, 3, 9, cfg.vocab_size);
    let a = h0_of(&cfg, &params, &ids, &[true; 27], 3);
    let b = h0_of(&cfg, &params, &ids, &[true; 27], 3);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn train_mode_dropout_is_seeded() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..toy(2, 1, DecoderSpan::Window(2))
    };
    let params = ParamStore::init(&cfg, 3).unwrap();
    let ids = vec![CLS, 9, 10, 11, 12];
    let run = |seed| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let enc = encoder_forward(&mut tape, &cfg, &p, &ids, &[true; 5], 1, Mode::Train { seed }).unwrap();
        tape.value(enc.hidden).data().to_vec()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn encoder_h0_depends_on_every_token() {
    let cfg = toy(1, 1, DecoderSpan::Window(2));
    let params = ParamStore::init(&cfg, 4).unwrap();
    let ids = vec![CLS, 10, 11, 12, 13, 14, 15];
    let valid = [true; 7];
    let base = h0_of(&cfg, &params, &ids, &valid, 1);
    for i in 1..ids.len() {
        let mut changed = ids.clone();
        changed[i] = 50;
        assert_ne!(base, h0_of(&cfg, &params, &changed, &valid, 1), "position {i}");
    }
}

#[test]
fn mlm_logits_shapes_and_cls_rejection() {
    let cfg = ModelConfig {
        vocab_size: 2000,
        ..toy(1, 1, DecoderSpan::Window(2))
    };
    let params = ParamStore::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids = random_rows(&mut rng, 2, 6, cfg.vocab_size);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape).unwrap();
    let enc = encoder_forward(&mut tape, &cfg, &p, &ids, &[true; 12], 2, Mode::Eval).unwrap();
    let five = mlm_logits(&mut tape, &cfg, &p, &enc, &[1, 2, 3, 7, 11]).unwrap();
    assert_eq!(tape.shape(five), &[5, 2000]);
    let none = mlm_logits(&mut tape, &cfg, &p, &enc, &[]).unwrap();
    assert_eq!(tape.shape(none), &[0, 2000]);
    assert!(matches!(mlm_logits(&mut tape, &cfg, &p, &enc, &[0]), Err(Error::Contract(_))));
    assert!(matches!(mlm_logits(&mut tape, &cfg, &p, &enc, &[6]), Err(Error::Contract(_))));
}

#[test]
fn mlm_output_is_tied_to_input_embeddings() {
    let cfg = toy(1, 1, DecoderSpan::Window(2));
    let mut params = ParamStore::init(&cfg, 6).unwrap();
    // the target row never appears in the input, so only the output side can move
    let ids = vec![CLS, 10, 11, 12];
    let logits = |params: &ParamStore| {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape).unwrap();
        let enc = encoder_forward(&mut tape, &cfg, &p, &ids, &[true; 4], 1, Mode::Eval).unwrap();
        let l = mlm_logits(&mut tape, &cfg, &p, &enc, &[2]).unwrap();
        tape.value(l).data().to_vec()
    };
    let before = logits(&params);
    let d = cfg.hidden_dim;
    let row = 42;
    for v in &mut params.get_mut("emb.tok").unwrap().data_mut()[row * d..(row + 1) * d] {
        *v += 0.5;
    }
    let after = logits(&params);
    for (j, (a, b)) in before.iter().zip(&after).enumerate() {
        if j == row {
            assert_ne!(a, b);
        } else {
            assert_eq!(a, b, "column {j}");
        }
    }
}

#[test]
fn decoder_output_shape_and_h0_shape_error() {
    let cfg = ModelConfig {
        vocab_size: 2000,
        ..toy(1, 2, DecoderSpan::Window(2))
    };
    let params = ParamStore::init(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let targets: Vec<u32> = (0..32).map(|_| rng.random_range(5..2000)).collect();
    let logits = decoder_logits(&cfg, &params, Tensor::randn([2, 32], 1.0, &mut rng), &targets, 2);
    assert_eq!(logits.shape(), &[2, 16, 2000]);

    let mut tape = Tape::new();
    let p = params.bind(&mut tape).unwrap();
    let bad = tape.constant(Tensor::zeros([2, 31])).unwrap();
    let err = decoder_forward(&mut tape, &cfg, &p, bad, &targets, 2, Mode::Eval).unwrap_err();
    assert!(matches!(err, Error::Tensor(seedenc_tensor::TensorError::Shape { .. })));
}

#[test]
fn decoder_mask_matches_examples() {
    let m = build_decoder_mask(5, DecoderSpan::Window(2));
    assert_eq!(attend_set(&m, 5, 4), vec![0, 2, 3, 4]);
    assert_eq!(attend_set(&m, 5, 1), vec![0, 1]);
    assert_eq!(attend_set(&m, 5, 0), vec![0]);
    let all = build_decoder_mask(5, DecoderSpan::All);
    assert_eq!(attend_set(&all, 5, 3), vec![0, 1, 2, 3]);
    for p in 0..6 {
        for q in 0..6 {
            assert_eq!(all[p * 6 + q], q <= p, "({p},{q})");
        }
    }
}

fn oracle_attends(p: usize, q: usize, span: DecoderSpan) -> bool {
    let window: Vec<usize> = match span {
        DecoderSpan::All => (1..=p).collect(),
        DecoderSpan::Window(k) => (1..=p).filter(|&s| s + k >= p).collect(),
    };
    q == 0 || window.contains(&q)
}

#[test]
fn decoder_mask_matches_set_oracle() {
    for n in 0..=16 {
        for span in [DecoderSpan::Window(1), DecoderSpan::Window(2), DecoderSpan::Window(4), DecoderSpan::All] {
            let m = build_decoder_mask(n, span);
            assert_eq!(m.len(), (n + 1) * (n + 1));
            for p in 0..=n {
                for q in 0..=n {
                    assert_eq!(m[p * (n + 1) + q], oracle_attends(p, q, span), "n={n} span={span} p={p} q={q}");
                }
            }
        }
    }
}

#[test]
fn decoder_mask_is_monotone_in_span() {
    for n in 0..=12 {
        let all = build_decoder_mask(n, DecoderSpan::All);
        for k in 1..=n + 1 {
            let a = build_decoder_mask(n, DecoderSpan::Window(k));
            let b = build_decoder_mask(n, DecoderSpan::Window(k + 1));
            for i in 0..a.len() {
                assert!(!a[i] || b[i]);
                assert!(!b[i] || all[i]);
            }
        }
    }
}

fn perturbed(targets: &[u32], pos: usize) -> Vec<u32> {
    let mut t = targets.to_vec();
    t[pos] = if t[pos] == 50 { 51 } else { 50 };
    t
}

#[test]
fn single_layer_span_two_ignores_out_of_window_tokens() {
    let cfg = toy(1, 1, DecoderSpan::Window(2));
    let params = ParamStore::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h0 = Tensor::randn([1, 32], 1.0, &mut rng);
    // targets x_1..x_8 at indices 0..8; slot 5 sees x_3, x_4, x_5 and h_0
    let targets: Vec<u32> = (0..8).map(|i| 10 + i).collect();
    let base = decoder_logits(&cfg, &params, h0.clone(), &targets, 1);
    for x in [1, 2] {
        let l = decoder_logits(&cfg, &params, h0.clone(), &perturbed(&targets, x - 1), 1);
        assert_eq!(logits_at(&base, 0, 5), logits_at(&l, 0, 5), "x_{x}");
    }
    for x in [3, 4, 5] {
        let l = decoder_logits(&cfg, &params, h0.clone(), &perturbed(&targets, x - 1), 1);
        assert_ne!(logits_at(&base, 0, 5), logits_at(&l, 0, 5), "x_{x}");
    }
}

#[test]
fn decoder_is_causal() {
    for span in [DecoderSpan::Window(2), DecoderSpan::All] {
        let cfg = toy(1, 2, span);
        let params = ParamStore::init(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h0 = Tensor::randn([1, 32], 1.0, &mut rng);
        let targets: Vec<u32> = (0..10).map(|i| 10 + i).collect();
        let base = decoder_logits(&cfg, &params, h0.clone(), &targets, 1);
        for t in 1..=10 {
            let l = decoder_logits(&cfg, &params, h0.clone(), &perturbed(&targets, t - 1), 1);
            // slot s predicts x_{s+1}; predictions of x_1..x_t must not see x_t
            for s in 0..t {
                assert_eq!(logits_at(&base, 0, s), logits_at(&l, 0, s), "span={span} x_{t} slot {s}");
            }
            if t < 10 {
                assert_ne!(logits_at(&base, 0, t), logits_at(&l, 0, t));
            }
        }
    }
}

#[test]
fn decoder_depends_on_h0() {
    let cfg = toy(1, 1, DecoderSpan::Window(2));
    let params = ParamStore::init(&cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let targets: Vec<u32> = (0..8).map(|i| 20 + i).collect();
    let h0 = Tensor::randn([1, 32], 1.0, &mut rng);
    let a = decoder_logits(&cfg, &params, h0, &targets, 1);
    let b = decoder_logits(&cfg, &params, Tensor::zeros([1, 32]), &targets, 1);
    for s in 0..8 {
        assert_ne!(logits_at(&a, 0, s), logits_at(&b, 0, s), "slot {s}");
    }
}

#[test]
fn encoder_reaches_decoder_only_through_h0() {
    let cfg = toy(2, 2, DecoderSpan::Window(2));
    let mut params = ParamStore::init(&cfg, 11).unwrap();
    let targets: Vec<u32> = (0..8).map(|i| 20 + i).collect();
    let base = decoder_logits(&cfg, &params, Tensor::zeros([2, 32]), &[targets.clone(), targets.clone()].concat(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("enc.") || n.starts_with("mlm."))
        .map(str::to_string)
        .collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let after = decoder_logits(&cfg, &params, Tensor::zeros([2, 32]), &[targets.clone(), targets].concat(), 2);
    assert_eq!(base, after);
}

#[test]
fn untied_decoder_has_its_own_tables() {
    let cfg = ModelConfig {
        tie_decoder_embeddings: false,
        ..toy(1, 1, DecoderSpan::Window(2))
    };
    let mut params = ParamStore::init(&cfg, 12).unwrap();
    assert!(params.contains("dec.tok") && params.contains("dec.out.w"));
    let targets: Vec<u32> = (0..6).map(|i| 20 + i).collect();
    let base = decoder_logits(&cfg, &params, Tensor::zeros([1, 32]), &targets, 1);
    for v in params.get_mut("emb.tok").unwrap().data_mut() {
        *v += 1.0;
    }
    assert_eq!(base, decoder_logits(&cfg, &params, Tensor::zeros([1, 32]), &targets, 1));
}
