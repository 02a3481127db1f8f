mod common;

use common::*;
use intentive::numcore::{adam_step, AdamState, Tape, Tensor};
use intentive::Error;

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let c = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_expansion() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(c), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { .. }) => {}
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_uniform_row() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    for v in tape.data(y) {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_analytic_row() {
    let mut tape = Tape::new();
    let x = tape
        .constant(Tensor::new(vec![1, 2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    assert!((tape.data(y)[0] - 0.25).abs() < 1e-12);
    assert!((tape.data(y)[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_nan_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
    assert!(tape.softmax_rows(x).is_err());
}

#[test]
fn layer_norm_constant_row_is_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 4], vec![3.0; 4]).unwrap());
    let gain = tape.constant(Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap());
    let bias = tape.constant(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
    let y = tape.layer_norm(x, gain, bias).unwrap();
    for v in tape.data(y) {
        assert_eq!(*v, 0.0);
    }
}

#[test]
fn layer_norm_already_normalized() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let gain = tape.constant(Tensor::new(vec![1, 2], vec![1.0; 2]).unwrap());
    let bias = tape.constant(Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap());
    let y = tape.layer_norm(x, gain, bias).unwrap();
    // variance is 1, epsilon makes the output a hair under +-1
    assert!((tape.data(y)[0] - 1.0).abs() < 1e-5);
    assert!((tape.data(y)[1] + 1.0).abs() < 1e-5);
}

#[test]
fn gelu_fixed_points() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 10.0, -10.0]).unwrap());
    let y = tape.gelu(x);
    let d = tape.data(y);
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 10.0).abs() < 1e-9, "large positive ~ identity");
    assert!(d[2].abs() < 1e-9, "large negative ~ zero");
}

#[test]
fn backward_square() {
    // y = x*x via dot at x = 3 -> dy/dx = 6
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap().with_grad());
    let y = tape.dot(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap().with_grad());
    let y = tape.scale(x, 2.0);
    match tape.backward(y) {
        Err(Error::Usage(_)) => {}
        other => panic!("expected usage error, got {other:?}"),
    }
}

#[test]
fn frozen_leaf_gets_no_gradient() {
    let mut tape = Tape::new();
    let frozen = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let live = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap().with_grad());
    let y = tape.dot(frozen, live).unwrap();
    tape.backward(y).unwrap();
    assert!(tape.grad(frozen).is_none());
    assert_eq!(tape.grad(live).unwrap(), &[1.0, 2.0]);
}

#[test]
fn adam_zero_grad_is_identity() {
    let mut p = Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap();
    let before = p.clone();
    let mut st = AdamState::new(0.1, &[3]);
    let zeros = vec![0.0; 3];
    adam_step(&mut [&mut p], &[&zeros], &mut st).unwrap();
    assert_eq!(p.data, before.data);
}

#[test]
fn adam_descends_on_square() {
    // f(x) = x^2 from x = 1 with lr 0.1: one step moves toward zero.
    let mut p = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let mut st = AdamState::new(0.1, &[1]);
    let g = vec![2.0 * p.data[0]];
    adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
    assert!(p.data[0] < 1.0 && p.data[0] > 0.0);
}

#[test]
fn adam_converges_on_quadratic() {
    let mut p = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let mut st = AdamState::new(0.1, &[1]);
    for _ in 0..200 {
        let g = vec![2.0 * p.data[0]];
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
    }
    assert!(p.data[0].abs() < 1e-2, "got {}", p.data[0]);
}

#[test]
fn adam_shape_mismatch_rejected() {
    let mut p = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let mut st = AdamState::new(0.1, &[3]);
    let g = vec![0.0, 0.0];
    assert!(adam_step(&mut [&mut p], &[&g], &mut st).is_err());
}

#[test]
fn matmul_sum_gradient_matches_fd() {
    let mut rng = seeded_rng(11);
    let a0 = random_vals(&mut rng, 12);
    let b0 = random_vals(&mut rng, 8);
    fd_check(
        &[(vec![3, 4], a0), (vec![4, 2], b0)],
        1e-6,
        1e-9,
        "sum(matmul(A,B))",
        |tape, ids| {
            let c = tape.matmul(ids[0], ids[1]).unwrap();
            tape.sum(c)
        },
    );
}
