use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedenc_core::analysis::{
    bar_chart_svg, cls_diversity_profile, decoder_cls_dependency, decomposition_check, exact_conditional_entropy,
    generate_markov_corpus, line_plot_svg, monte_carlo_entropy, paired_gap, stationary_distribution,
    train_theory_decoder, H0Mode, MarkovSpec, TheoryDecoderConfig,
};
use seedenc_core::model::{DecoderSpan, ModelConfig, ParamStore};
use seedenc_core::text::TokenSequence;
use seedenc_core::Error;

fn two_state() -> MarkovSpec {
    MarkovSpec::from_rows(1, vec![vec![0.9, 0.1], vec![0.5, 0.5]], 40)
}

fn binary_entropy(p: f64) -> f64 {
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

#[test]
fn entropy_of_uniform_and_deterministic_chains() {
    for (v, m) in [(4, 1), (3, 2), (5, 1)] {
        let h = exact_conditional_entropy(&MarkovSpec::uniform(v, m, 10)).unwrap();
        assert!((h.nats - (v as f64).ln()).abs() < 1e-12);
        assert!(h.ergodic);
    }
    let cycle = MarkovSpec::from_rows(1, vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]], 12);
    assert_eq!(exact_conditional_entropy(&cycle).unwrap().nats, 0.0);
    let c = generate_markov_corpus(&cycle, 50, 1).unwrap();
    for s in &c.sequences {
        for w in s.windows(2) {
            assert_eq!(w[1], (w[0] + 1) % 3);
        }
    }
    let starts: Vec<usize> = c.sequences.iter().map(|s| s[0]).collect();
    for (a, sa) in c.sequences.iter().zip(&starts) {
        for (b, sb) in c.sequences.iter().zip(&starts) {
            if sa == sb {
                assert_eq!(a, b);
            }
        }
    }
}

#[test]
fn two_state_chain_matches_closed_form() {
    let spec = two_state();
    // Two-state chain: pi_0 = P(1->0) / (P(0->1) + P(1->0)).
    let pi0 = 0.5 / (0.1 + 0.5);
    let st = stationary_distribution(&spec, 0).unwrap();
    assert!((st.pi[0] - pi0).abs() < 1e-10 && st.unique);
    let h = pi0 * binary_entropy(0.9) + (1.0 - pi0) * binary_entropy(0.5);
    let exact = exact_conditional_entropy(&spec).unwrap().nats;
    assert!((exact - h).abs() < 1e-10);
    let corpus = generate_markov_corpus(&spec, 2000, 3).unwrap();
    let (mc, se) = monte_carlo_entropy(&spec, &corpus).unwrap();
    assert!((mc - exact).abs() < 3.0 * se, "{mc} vs {exact} (se {se})");
}

#[test]
fn empirical_frequencies_match_the_spec() {
    let corpus = generate_markov_corpus(&MarkovSpec::uniform(4, 1, 50), 400, 9).unwrap();
    let total = corpus.sequences.iter().map(Vec::len).sum::<usize>() as f64;
    for y in 0..4 {
        let c = corpus.sequences.iter().flatten().filter(|&&s| s == y).count() as f64;
        let sigma = (0.25 * 0.75 / total).sqrt();
        assert!((c / total - 0.25).abs() < 3.0 * sigma);
    }

    let spec = two_state();
    let corpus = generate_markov_corpus(&spec, 500, 4).unwrap();
    let mut counts = [[0.0f64; 2]; 2];
    for s in &corpus.sequences {
        for w in s.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
    }
    let p = [[0.9, 0.1], [0.5, 0.5]];
    for a in 0..2 {
        let n = counts[a][0] + counts[a][1];
        for b in 0..2 {
            let sigma = (p[a][b] * (1.0 - p[a][b]) / n).sqrt();
            assert!((counts[a][b] / n - p[a][b]).abs() < 3.0 * sigma, "{a}->{b}");
        }
    }
}

#[test]
fn monte_carlo_error_shrinks_like_inverse_root_n() {
    let spec = MarkovSpec::random(2, 4, 2, 3, 30, 11);
    let exact = exact_conditional_entropy(&spec).unwrap().nats;
    let (_, se_small) = monte_carlo_entropy(&spec, &generate_markov_corpus(&spec, 250, 1).unwrap()).unwrap();
    let (mc, se_large) = monte_carlo_entropy(&spec, &generate_markov_corpus(&spec, 4000, 2).unwrap()).unwrap();
    let ratio = se_small / se_large;
    assert!((3.0..5.3).contains(&ratio), "ratio {ratio}");
    assert!((mc - exact).abs() < 3.0 * se_large);
}

#[test]
fn non_ergodic_chain_is_flagged() {
    let absorbing = MarkovSpec::from_rows(1, vec![vec![1.0, 0.0], vec![0.0, 1.0]], 10);
    let st = stationary_distribution(&absorbing, 0).unwrap();
    assert!(!st.unique);
    let h = exact_conditional_entropy(&absorbing).unwrap();
    assert!(!h.ergodic);
    assert_eq!(h.nats, 0.0);
}

#[test]
fn spec_validation_and_file_format() {
    let mut bad = two_state();
    bad.topics[0].rows[1] = vec![0.5, 0.6];
    assert!(matches!(bad.validate(), Err(Error::Spec(_))));
    let mut neg = two_state();
    neg.topics[0].rows[0] = vec![1.1, -0.1];
    assert!(neg.validate().is_err());
    assert!(generate_markov_corpus(&bad, 1, 0).is_err());
    let mut short = two_state();
    short.topics[0].rows.pop();
    assert!(short.validate().is_err());
    let mut weights = MarkovSpec::random(2, 3, 1, 2, 10, 0);
    weights.topics[0].weight = 0.9;
    assert!(weights.validate().is_err());

    let spec = MarkovSpec::random(3, 4, 2, 2, 20, 5);
    spec.validate().unwrap();
    assert_eq!(MarkovSpec::from_toml(&spec.to_toml().unwrap()).unwrap(), spec);
    let text = "order = 1\nvocab = 2\nseq_len = 8\n\n[[topics]]\nweight = 1.0\nrows = [[0.9, 0.1], [0.5, 0.5]]\n";
    assert_eq!(MarkovSpec::from_toml(text).unwrap().topics[0].rows[0], vec![0.9, 0.1]);
    assert!(MarkovSpec::from_toml(&format!("{text}extra = 1\n")).is_err());
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = MarkovSpec::random(3, 5, 1, 2, 16, 8);
    let a = generate_markov_corpus(&spec, 30, 1).unwrap();
    assert_eq!(a, generate_markov_corpus(&spec, 30, 1).unwrap());
    assert_ne!(a, generate_markov_corpus(&spec, 30, 2).unwrap());
    assert!(a.sequences.iter().all(|s| s.len() == 16 && s.iter().all(|&y| y < 5)));
    assert!(a.topics.iter().all(|&z| z < 3));
}

fn quick_decoder(span: DecoderSpan, layers: usize, steps: u64) -> TheoryDecoderConfig {
    let mut tc = TheoryDecoderConfig {
        span,
        layers,
        steps,
        ..TheoryDecoderConfig::default()
    };
    tc.optim.total_steps = steps;
    tc
}

#[test]
fn decomposition_needs_enough_positions() {
    let spec = MarkovSpec::uniform(4, 1, 20);
    let dec = train_theory_decoder(&spec, &quick_decoder(DecoderSpan::All, 1, 2)).unwrap();
    let eval = generate_markov_corpus(&spec, 10, 1).unwrap();
    assert!(matches!(
        decomposition_check(&dec, "d", &spec, &eval, H0Mode::True, 0),
        Err(Error::InsufficientSample { got: 190, need: 1000 })
    ));
}

#[test]
fn uniform_chain_loss_is_ln_v() {
    let spec = MarkovSpec::uniform(6, 1, 32);
    let dec = train_theory_decoder(&spec, &quick_decoder(DecoderSpan::Window(2), 1, 300)).unwrap();
    let eval = generate_markov_corpus(&spec, 100, 77).unwrap();
    let r = decomposition_check(&dec, "weak", &spec, &eval, H0Mode::True, 0).unwrap();
    assert!((r.expected_loss - 6f64.ln()).abs() < 0.05, "{r:?}");
    assert!(r.kl_consistent());
}

#[test]
fn topic_information_in_h0_lowers_the_loss() {
    let spec = MarkovSpec::random(4, 8, 1, 3, 32, 2);
    let dec = train_theory_decoder(&spec, &quick_decoder(DecoderSpan::Window(2), 2, 400)).unwrap();
    let eval = generate_markov_corpus(&spec, 150, 999).unwrap();
    let (gap, se) = paired_gap(&dec, &spec, &eval, H0Mode::True, H0Mode::Shuffled, 5).unwrap();
    assert!(gap > 3.0 * se, "gap {gap} se {se}");
    for mode in [H0Mode::True, H0Mode::Zero, H0Mode::Shuffled] {
        let r = decomposition_check(&dec, "weak", &spec, &eval, mode, 5).unwrap();
        assert!(r.kl_consistent(), "{r:?}");
    }
}

#[test]
fn restricted_span_cannot_beat_the_floor_of_full_attention() {
    let spec = MarkovSpec::random(1, 3, 3, 2, 32, 3);
    let eval = generate_markov_corpus(&spec, 150, 5).unwrap();
    let narrow = train_theory_decoder(&spec, &quick_decoder(DecoderSpan::Window(1), 1, 600)).unwrap();
    let wide = train_theory_decoder(&spec, &quick_decoder(DecoderSpan::All, 1, 600)).unwrap();
    let rn = decomposition_check(&narrow, "span1", &spec, &eval, H0Mode::True, 0).unwrap();
    let rw = decomposition_check(&wide, "all", &spec, &eval, H0Mode::True, 0).unwrap();
    assert!(rn.expected_loss >= rw.expected_loss - 2.0 * rw.standard_error, "{rn:?} {rw:?}");
    assert!(rn.kl_consistent() && rw.kl_consistent());
}

fn probe_model(span: DecoderSpan) -> ModelConfig {
    ModelConfig {
        num_enc_layers: 2,
        num_dec_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ff_dim: 32,
        vocab_size: 40,
        max_seq_len: 32,
        dropout: 0.1,
        decoder_span: span,
        tie_decoder_embeddings: true,
        init_std: 0.2,
    }
}

fn corpus(n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let w: Vec<u32> = (0..len).map(|_| rng.random_range(5..40)).collect();
            TokenSequence::from_words(&w).unwrap()
        })
        .collect()
}

#[test]
fn diversity_profile_smoke() {
    let cfg = probe_model(DecoderSpan::Window(2));
    let params = ParamStore::init(&cfg, 0).unwrap();
    let docs: Vec<TokenSequence> = corpus(20, 25, 1).into_iter().chain(corpus(1, 5, 2)).collect();
    let p = cls_diversity_profile(&cfg, &params, &docs, &[4, 10, 25, 30], 50, 3).unwrap();
    assert!((p.self_cosine - 1.0).abs() < 1e-6);
    assert_eq!(p.rows.iter().map(|r| r.length).collect::<Vec<_>>(), [4, 10, 25]);
    for r in &p.rows {
        assert_eq!(r.pairs, 50);
        assert!((-1.0..=1.0).contains(&r.mean) && r.mean < 1.0 - 1e-9);
    }
    assert_eq!(p, cls_diversity_profile(&cfg, &params, &docs, &[4, 10, 25, 30], 50, 3).unwrap());
}

#[test]
fn dependency_curve_smoke_and_errors() {
    let cfg = probe_model(DecoderSpan::All);
    let params = ParamStore::init(&cfg, 0).unwrap();
    let docs = corpus(10, 20, 4);
    let curve = decoder_cls_dependency(&cfg, &params, &docs, &[0, 1, 5, 19, 20, 40]).unwrap();
    assert!((curve.layer0_slot0 - 1.0).abs() < 1e-6);
    assert_eq!(curve.points.iter().map(|p| p.position).collect::<Vec<_>>(), [0, 1, 5, 19]);
    assert!(curve.points.iter().all(|p| p.sequences == 10 && p.mean_cosine.abs() <= 1.0));
    match decoder_cls_dependency(&cfg, &params.encoder_only(), &docs, &[1]) {
        Err(Error::MissingTensors(names)) => assert!(names.iter().any(|n| n.starts_with("dec."))),
        other => panic!("expected missing tensors, got {other:?}"),
    }
}

#[test]
fn svg_plots_are_self_contained() {
    let series = vec![
        ("a".to_string(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.7)]),
        ("b<c".to_string(), vec![(0.0, 0.2), (2.0, 0.9)]),
    ];
    let svg = line_plot_svg("t", "x", "y", &series);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("b&lt;c"));
    let bars = bar_chart_svg("m", "v", &[("x".into(), 0.3), ("y".into(), 0.1)]);
    assert_eq!(bars.matches("<rect").count(), 3);
}
