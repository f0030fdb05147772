use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedenc_tensor::gradcheck::{analytic_gradients, relative_error};
use seedenc_tensor::{finite_diff_check, GradCheckConfig, Tape, Tensor, TensorError, Var};

type R<T> = Result<T, TensorError>;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand64(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

#[test]
fn linear_identity_and_hand_sum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let w = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = tape.constant(t64(&[2], &[0.0, 0.0])).unwrap();
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(tape.shape(y), &[1, 2, 2]);

    let x = tape.constant(t64(&[1, 2], &[1.0, 2.0])).unwrap();
    let w = tape.constant(t64(&[2, 1], &[1.0, 1.0])).unwrap();
    let b = tape.constant(t64(&[1], &[3.0])).unwrap();
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[6.0]);
}

#[test]
fn linear_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (b, n, din, dout) = (2, 5, 7, 3);
    let x = rand64(&[b, n, din], &mut rng);
    let w = rand64(&[din, dout], &mut rng);
    let bias = rand64(&[dout], &mut rng);
    let mut oracle = vec![0.0f64; b * n * dout];
    for r in 0..b * n {
        for j in 0..dout {
            let mut acc = bias.data()[j];
            for k in 0..din {
                acc += x.data()[r * din + k] * w.data()[k * dout + j];
            }
            oracle[r * dout + j] = acc;
        }
    }
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x).unwrap(),
        tape.constant(w).unwrap(),
        tape.constant(bias).unwrap(),
    );
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    for (a, o) in tape.value(y).data().iter().zip(&oracle) {
        assert!(relative_error(*a, *o, 1e-8) < 1e-6);
    }
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([2, 3])).unwrap();
    let w = tape.constant(Tensor::zeros([4, 5])).unwrap();
    let err = tape.linear(x, w, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[0.0, 0.0, 0.0])).unwrap();
    let y = tape.softmax_masked(x, &[true; 3]).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    let x = tape.constant(t64(&[3], &[5.0, 1.0, 1.0])).unwrap();
    let y = tape.softmax_masked(x, &[true, false, false]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0]);

    let x = tape.constant(t64(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let y = tape.softmax_masked(x, &[true; 3]).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in tape.value(y).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-6);
    }
}

#[test]
fn softmax_rejects_fully_masked_row() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([2, 2])).unwrap();
    let err = tape.softmax_masked(x, &[true, true, false, false]).unwrap_err();
    assert_eq!(err, TensorError::InvalidMask { row: 1 });
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f32>::new();
    let g = tape.constant(Tensor::ones([3])).unwrap();
    let b = tape.constant(Tensor::zeros([3])).unwrap();
    let x = tape.constant(Tensor::new([3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-6));

    let g = tape.constant(Tensor::ones([2])).unwrap();
    let b = tape.constant(Tensor::zeros([2])).unwrap();
    let x = tape.constant(Tensor::new([2], vec![-1.0, 1.0]).unwrap()).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_matches_double_precision_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 16;
    let row: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mean = row.iter().sum::<f64>() / d as f64;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let reference: Vec<f64> = (0..d)
        .map(|j| (row[j] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j])
        .collect();

    let mut tape = Tape::<f32>::new();
    let f = |v: &[f64]| Tensor::new([v.len()], v.iter().map(|&x| x as f32).collect()).unwrap();
    let x = tape.constant(f(&row)).unwrap();
    let g = tape.constant(f(&gamma)).unwrap();
    let b = tape.constant(f(&beta)).unwrap();
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    for (a, r) in tape.value(y).data().iter().zip(&reference) {
        assert!((*a as f64 - r).abs() < 1e-5);
    }

    // unit gamma: zero mean, unit population variance
    let ones = tape.constant(Tensor::ones([d])).unwrap();
    let zeros = tape.constant(Tensor::zeros([d])).unwrap();
    let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
    let out: Vec<f64> = tape.value(y).data().iter().map(|&v| v as f64).collect();
    let m = out.iter().sum::<f64>() / d as f64;
    let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
    assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-3);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(t64(&[1, 2], &[0.0, 0.0])).unwrap();
    let loss = tape.cross_entropy(l, &[0], -100).unwrap();
    assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);

    let l = tape.constant(t64(&[1, 2], &[10.0, -10.0])).unwrap();
    let loss = tape.cross_entropy(l, &[0], -100).unwrap();
    assert!(tape.value(loss).item() < 1e-4);

    let rows = [[0.3, -1.2, 2.0], [1.0, 1.0, 0.0], [-0.5, 0.25, 0.75]];
    let targets = [2i64, -100, 0];
    let oracle: f64 = rows
        .iter()
        .zip(&targets)
        .filter(|(_, &t)| t != -100)
        .map(|(r, &t)| {
            let z: f64 = r.iter().map(|v: &f64| v.exp()).sum();
            -(r[t as usize].exp() / z).ln()
        })
        .sum::<f64>()
        / 2.0;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let l = tape.leaf(t64(&[3, 3], &flat).with_requires_grad(true)).unwrap();
    let loss = tape.cross_entropy(l, &targets, -100).unwrap();
    assert!((tape.value(loss).item() - oracle).abs() < 1e-12);
    tape.backward(loss).unwrap();
    // ignored row receives no gradient
    assert!(tape.leaf_grad(l).unwrap()[3..6].iter().all(|&g| g == 0.0));
}

#[test]
fn cross_entropy_all_ignored_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(t64(&[2, 2], &[0.0; 4])).unwrap();
    assert_eq!(tape.cross_entropy(l, &[-100, -100], -100).unwrap_err(), TensorError::EmptyLoss);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).with_requires_grad(true)).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.leaf_grad(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true)).unwrap();
    let sq = tape.mul(w, w).unwrap();
    let half = tape.scale(sq, 0.5).unwrap();
    tape.backward(half).unwrap();
    assert_eq!(tape.leaf_grad(w).unwrap(), &[3.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]).with_requires_grad(true)).unwrap();
    assert_eq!(tape.backward(x).unwrap_err(), TensorError::NotScalar(vec![2]));

    let mut other = Tape::<f64>::new();
    let y = other.constant(Tensor::scalar(1.0)).unwrap();
    assert_eq!(tape.backward(y).unwrap_err(), TensorError::ForeignVar);
}

#[test]
fn shared_parameter_accumulates_both_uses() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand64(&[4, 3], &mut rng);
    let w = rand64(&[3, 2], &mut rng);
    let twice = |tape: &mut Tape<f64>, v: &[Var]| -> R<Var> {
        let a = tape.linear(v[0], v[1], None)?;
        let b = tape.linear(v[0], v[1], None)?;
        let s = tape.add(a, b)?;
        let sq = tape.mul(s, s)?;
        tape.sum(sq)
    };
    let once = |tape: &mut Tape<f64>, v: &[Var]| -> R<Var> {
        let a = tape.linear(v[0], v[1], None)?;
        let s = tape.scale(a, 2.0)?;
        let sq = tape.mul(s, s)?;
        tape.sum(sq)
    };
    let params = vec![x, w];
    let g1 = analytic_gradients(&twice, &params).unwrap();
    let g2 = analytic_gradients(&once, &params).unwrap();
    for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn leaf_gradients_accumulate_across_passes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]).with_requires_grad(true)).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.leaf_grad(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn([4, 8], 1.0, &mut rng);
        let w = Tensor::<f32>::randn([8, 8], 0.3, &mut rng);
        let mut tape = Tape::new();
        let (x, w) = (tape.constant(x).unwrap(), tape.constant(w).unwrap());
        let h = tape.linear(x, w, None).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = tape.dropout(h, 0.1, &mut rng).unwrap();
        tape.value(h).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

/// Every differentiable primitive, checked against central differences in
/// 64-bit mode across five seeds.
#[test]
fn every_primitive_passes_finite_difference_check() {
    type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> R<Var>>);
    let cases: Vec<Case> = vec![
        (
            "linear",
            vec![vec![2, 3, 4], vec![4, 5], vec![5]],
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
        ),
        (
            "batched_matmul",
            vec![vec![2, 3, 4], vec![2, 4, 2]],
            Box::new(|t, v| {
                let y = t.batched_matmul(v[0], v[1], false)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
        ),
        (
            "batched_matmul_nt",
            vec![vec![2, 3, 4], vec![2, 5, 4]],
            Box::new(|t, v| {
                let y = t.batched_matmul(v[0], v[1], true)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
        ),
        (
            "add_broadcast",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.mul(y, y)?;
                t.mean(y)
            }),
        ),
        (
            "gelu",
            vec![vec![3, 5]],
            Box::new(|t, v| {
                let y = t.gelu(v[0])?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
        ),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6], vec![3, 6]],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let y = t.mul(y, v[3])?;
                t.sum(y)
            }),
        ),
        (
            "softmax_masked",
            vec![vec![2, 4], vec![2, 4]],
            Box::new(|t, v| {
                let y = t.softmax_masked(v[0], &[true, false, true, true, true, true, false, true])?;
                let y = t.mul(y, v[1])?;
                t.sum(y)
            }),
        ),
        (
            "cross_entropy",
            vec![vec![4, 6]],
            Box::new(|t, v| t.cross_entropy(v[0], &[1, -100, 5, 0], -100)),
        ),
        (
            "embedding_gather_concat",
            vec![vec![5, 3], vec![2, 3], vec![6, 3]],
            Box::new(|t, v| {
                let e = t.embedding(v[0], &[1, 4, 1, 0], &[2, 2])?;
                let c = t.concat_rows(e, v[1])?;
                let g = t.gather_rows(c, &[5, 0, 2, 2, 4, 1], &[6])?;
                let y = t.mul(g, v[2])?;
                t.sum(y)
            }),
        ),
        (
            "swap_axes_reshape",
            vec![vec![2, 3, 2, 2], vec![2, 2, 3, 2]],
            Box::new(|t, v| {
                let s = t.swap_axes12(v[0])?;
                let r = t.reshape(s, &[2, 2, 3, 2])?;
                let y = t.mul(r, v[1])?;
                t.sum(y)
            }),
        ),
        (
            "row_dot_relu",
            vec![vec![4, 3], vec![4, 3], vec![4, 3]],
            Box::new(|t, v| {
                let p = t.row_dot(v[0], v[1])?;
                let n = t.row_dot(v[0], v[2])?;
                let d = t.sub(n, p)?;
                let m = t.add_scalar(d, 0.05)?;
                let r = t.relu(m)?;
                t.mean(r)
            }),
        ),
        (
            "l2_normalize",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| {
                let y = t.l2_normalize(v[0])?;
                let y = t.mul(y, v[1])?;
                t.sum(y)
            }),
        ),
    ];
    for (name, shapes, f) in &cases {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let params: Vec<Tensor<f64>> = shapes.iter().map(|s| rand64(s, &mut rng)).collect();
            let report = finite_diff_check(|t: &mut Tape<f64>, v: &[Var]| f(t, v), &params, &GradCheckConfig::float64())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(report.passed(), "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn float32_linear_passes_float32_tolerance() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            Tensor::<f32>::randn([3, 4], 1.0, &mut rng),
            Tensor::<f32>::randn([4, 2], 1.0, &mut rng),
        ];
        let f = |t: &mut Tape<f32>, v: &[Var]| -> R<Var> {
            let y = t.linear(v[0], v[1], None)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        };
        let cfg = GradCheckConfig {
            h: 1e-2,
            ..GradCheckConfig::float32()
        };
        let report = finite_diff_check(f, &params, &cfg).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        logits in proptest::collection::vec(-20.0f64..20.0, 12),
        mask in proptest::collection::vec(any::<bool>(), 4),
    ) {
        let mut mask = mask;
        mask[0] = true;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([3, 4], logits).unwrap()).unwrap();
        let y = tape.softmax_masked(x, &mask).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for (p, &m) in row.iter().zip(&mask) {
                prop_assert!(*p >= 0.0);
                if !m {
                    prop_assert_eq!(*p, 0.0);
                }
            }
        }
    }
}
