use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::{max_op_gradient_error, random_tensor};
use super::*;
use crate::error::Error;

const PRIMITIVE_TOL: f64 = 1e-6;

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_and_hand_expansion() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::eye(2));
    let b = t.constant(m(2, 2, &[3.0, 4.0, 5.0, 6.0]));
    let out = t.matmul(i2, b).unwrap();
    assert_eq!(t.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

    let x = t.constant(m(1, 2, &[1.0, 2.0]));
    let y = t.constant(m(2, 1, &[3.0, 4.0]));
    let xy = t.matmul(x, y).unwrap();
    assert_eq!(t.value(xy).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let inputs = [
        random_tensor(&[3, 4], &mut r),
        random_tensor(&[4, 2], &mut r),
    ];
    let err = max_op_gradient_error(&inputs, 1, |t, v| t.matmul(v[0], v[1])).unwrap();
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn softmax_uniform_and_stable() {
    let mut t = Tape::new();
    let a = t.constant(m(2, 3, &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
    let s = t.softmax_rows(a);
    let v = t.value(s);
    for j in 0..3 {
        assert!((v.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((v.get(1, 0) - 1.0).abs() < 1e-12);
    assert!(v.get(1, 1) < 1e-300 + 1e-12);
    assert!(v.is_finite());
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let inputs = [random_tensor(&[2, 3], &mut rng(5))];
    let err = max_op_gradient_error(&inputs, 2, |t, v| Ok(t.softmax_rows(v[0]))).unwrap();
    assert!(err < PRIMITIVE_TOL, "{err}");
    let inputs = [random_tensor(&[4, 4], &mut rng(6))];
    let err = max_op_gradient_error(&inputs, 2, |t, v| Ok(t.causal_softmax_rows(v[0]))).unwrap();
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn causal_softmax_never_reads_future_columns() {
    let mut t = Tape::new();
    let a = t.constant(m(2, 2, &[0.3, f64::MAX, 0.1, 0.2]));
    let s = t.causal_softmax_rows(a);
    assert_eq!(t.value(s).data()[..2], [1.0, 0.0]);
}

#[test]
fn layer_norm_cases() {
    let mut t = Tape::new();
    let gain = t.constant(Tensor::row(vec![1.0, 1.0]));
    let bias = t.constant(Tensor::row(vec![0.0, 0.0]));
    let x = t.constant(m(2, 2, &[5.0, 5.0, 1.0, -1.0]));
    let y = t.layer_norm(x, gain, bias).unwrap();
    let v = t.value(y);
    assert_eq!(v.row_slice(0), &[0.0, 0.0]);
    let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((v.get(1, 0) - expected).abs() < 1e-15);
    assert!((v.get(1, 1) + expected).abs() < 1e-15);
    assert!((v.get(1, 0) - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut r = rng(7);
    let inputs = [
        random_tensor(&[2, 4], &mut r),
        random_tensor(&[1, 4], &mut r),
        random_tensor(&[1, 4], &mut r),
    ];
    let err = max_op_gradient_error(&inputs, 3, |t, v| t.layer_norm(v[0], v[1], v[2])).unwrap();
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn structural_ops_gradients() {
    let mut r = rng(11);
    let a = random_tensor(&[4, 3], &mut r);
    let b = random_tensor(&[4, 3], &mut r);
    let w = random_tensor(&[4, 1], &mut r);
    let row = random_tensor(&[1, 3], &mut r);
    let cases: Vec<(&str, f64)> = vec![
        (
            "gather",
            max_op_gradient_error(std::slice::from_ref(&a), 1, |t, v| {
                t.gather_rows(v[0], &[2, 0, 2, 1, 3])
            })
            .unwrap(),
        ),
        (
            "scatter",
            max_op_gradient_error(std::slice::from_ref(&a), 1, |t, v| {
                t.scatter_add_rows(v[0], &[1, 1, 0, 2], 3)
            })
            .unwrap(),
        ),
        (
            "concat_rows",
            max_op_gradient_error(&[a.clone(), row.clone()], 1, |t, v| {
                t.concat_rows(&[v[0], v[1]])
            })
            .unwrap(),
        ),
        (
            "slice_rows",
            max_op_gradient_error(std::slice::from_ref(&a), 1, |t, v| t.slice_rows(v[0], 1, 2)).unwrap(),
        ),
        (
            "concat_cols",
            max_op_gradient_error(&[a.clone(), w.clone()], 1, |t, v| {
                t.concat_cols(&[v[1], v[0]])
            })
            .unwrap(),
        ),
        (
            "slice_cols",
            max_op_gradient_error(std::slice::from_ref(&a), 1, |t, v| t.slice_cols(v[0], 1, 2)).unwrap(),
        ),
        (
            "row_dot",
            max_op_gradient_error(&[a.clone(), b.clone()], 1, |t, v| t.row_dot(v[0], v[1]))
                .unwrap(),
        ),
        (
            "segment_softmax",
            max_op_gradient_error(std::slice::from_ref(&w), 1, |t, v| {
                t.segment_softmax(v[0], &[0, 1, 0, 0])
            })
            .unwrap(),
        ),
        (
            "mul_rows",
            max_op_gradient_error(&[a.clone(), w.clone()], 1, |t, v| t.mul_rows(v[0], v[1]))
                .unwrap(),
        ),
        (
            "mean_rows",
            max_op_gradient_error(std::slice::from_ref(&a), 1, |t, v| t.mean_rows(v[0])).unwrap(),
        ),
        (
            "add_row",
            max_op_gradient_error(&[a.clone(), row.clone()], 1, |t, v| t.add_row(v[0], v[1]))
                .unwrap(),
        ),
        (
            "mul",
            max_op_gradient_error(&[a.clone(), b.clone()], 1, |t, v| t.mul(v[0], v[1])).unwrap(),
        ),
        (
            "gelu",
            max_op_gradient_error(std::slice::from_ref(&a), 1, |t, v| Ok(t.gelu(v[0]))).unwrap(),
        ),
        (
            "transpose",
            max_op_gradient_error(std::slice::from_ref(&a), 1, |t, v| Ok(t.transpose(v[0]))).unwrap(),
        ),
    ];
    for (name, err) in cases {
        assert!(err < PRIMITIVE_TOL, "{name}: {err}");
    }
}

#[test]
fn cross_entropy_cases() {
    // near-perfect prediction
    let mut t = Tape::new();
    let mut logits = vec![0.0; 3 * 4];
    for (pos, target) in [(0, 1), (1, 3), (2, 0)] {
        logits[pos * 4 + target] = 20.0;
    }
    let l = t.constant(m(3, 4, &logits));
    let loss = t
        .cross_entropy_masked(l, &[1, 3, 0], &[true, true, true])
        .unwrap();
    assert!(t.value(loss).item() < 1e-7);

    // uniform logits, V=4
    let l = t.constant(Tensor::zeros(&[2, 4]));
    let loss = t.cross_entropy_masked(l, &[2, 1], &[false, true]).unwrap();
    assert!((t.value(loss).item() - 4f64.ln()).abs() < 1e-14);

    // all-zero mask
    let err = t
        .cross_entropy_masked(l, &[2, 1], &[false, false])
        .unwrap_err();
    assert!(matches!(err, Error::DegenerateLoss));

    let err = t
        .cross_entropy_masked(l, &[2, 4], &[true, true])
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn cross_entropy_gradient_zero_where_masked() {
    let mut t = Tape::new();
    let l = t.leaf(random_tensor(&[3, 5], &mut rng(2)), true);
    let loss = t
        .cross_entropy_masked(l, &[0, 4, 2], &[true, false, true])
        .unwrap();
    let g = t.backward(loss).unwrap().grad(l);
    assert!(g.row_slice(1).iter().all(|&v| v == 0.0));
    assert!(g.row_slice(0).iter().any(|&v| v != 0.0));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let inputs = [random_tensor(&[3, 5], &mut rng(9))];
    let err = max_op_gradient_error(&inputs, 1, |t, v| {
        t.cross_entropy_masked(v[0], &[0, 4, 2], &[true, false, true])
    })
    .unwrap();
    assert!(err < PRIMITIVE_TOL, "{err}");
}

#[test]
fn backward_analytic_cases() {
    let p0 = random_tensor(&[2, 3], &mut rng(4));
    let mut t = Tape::new();
    let p = t.leaf(p0.clone(), true);
    let s = t.sum(p);
    assert!(t
        .backward(s)
        .unwrap()
        .grad(p)
        .data()
        .iter()
        .all(|&g| g == 1.0));

    let mut t = Tape::new();
    let p = t.leaf(p0.clone(), true);
    let unused = t.leaf(Tensor::zeros(&[4]), true);
    let sq = t.mul(p, p).unwrap();
    let s = t.sum(sq);
    let half = t.scale(s, 0.5);
    let grads = t.backward(half).unwrap();
    assert_eq!(grads.grad(p), p0);
    assert_eq!(grads.grad(unused), Tensor::zeros(&[4]));
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let p = t.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(matches!(t.backward(p), Err(Error::Contract(_))));
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let mut r = rng(21);
        let mut t = Tape::new();
        let a = t.leaf(random_tensor(&[3, 4], &mut r), true);
        let b = t.leaf(random_tensor(&[4, 4], &mut r), true);
        let h = t.matmul(a, b).unwrap();
        let s = t.softmax_rows(h);
        let g = t.gelu(s);
        let loss = t
            .cross_entropy_masked(g, &[0, 1, 3], &[true, true, true])
            .unwrap();
        let grads = t.backward(loss).unwrap();
        (t.value(loss).clone(), grads.grad(a), grads.grad(b))
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in prop::collection::vec(-50.0f64..50.0, 1..8),
        shift in -100.0f64..100.0,
    ) {
        let mut t = Tape::new();
        let n = row.len();
        let a = t.constant(Tensor::row(row.clone()));
        let b = t.constant(Tensor::row(row.iter().map(|v| v + shift).collect()));
        let sa = t.softmax_rows(a);
        let sb = t.softmax_rows(b);
        let total: f64 = t.value(sa).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(t.value(sa).max_abs_diff(t.value(sb)) < 1e-12);
        prop_assert_eq!(t.value(sa).len(), n);
    }
}
