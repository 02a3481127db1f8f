//! Finite-difference oracles for every differentiable operation.
//! Each test contracts the op's output to a scalar through a fixed
//! random bilinear form u'.Y.w so that every output element receives a
//! distinct upstream gradient.

mod common;

use common::*;
use intentive::numcore::{Tape, Tensor, TensorId};

/// s = u' * Y * w with constant random u (n) and w (d).
fn contract(tape: &mut Tape, y: TensorId, u: &[f64], w: &[f64]) -> TensorId {
    let n = tape.shape(y).0;
    let d = tape.shape(y).1;
    let uc = tape.constant(Tensor::new(vec![1, n], u[..n].to_vec()).unwrap());
    let wc = tape.constant(Tensor::new(vec![d, 1], w[..d].to_vec()).unwrap());
    let uy = tape.matmul(uc, y).unwrap();
    let s = tape.matmul(uy, wc).unwrap();
    tape.sum(s)
}

#[test]
fn grad_matmul_both_sides() {
    let mut rng = seeded_rng(101);
    let (u, w) = (random_vals(&mut rng, 3), random_vals(&mut rng, 2));
    let a0 = random_vals(&mut rng, 12);
    let b0 = random_vals(&mut rng, 8);
    fd_check(&[(vec![3, 4], a0), (vec![4, 2], b0)], 1e-6, 1e-9, "matmul", |t, ids| {
        let y = t.matmul(ids[0], ids[1]).unwrap();
        contract(t, y, &u, &w)
    });
}

#[test]
fn grad_matmul_nt() {
    let mut rng = seeded_rng(102);
    let (u, w) = (random_vals(&mut rng, 3), random_vals(&mut rng, 5));
    let a0 = random_vals(&mut rng, 12);
    let b0 = random_vals(&mut rng, 20);
    fd_check(&[(vec![3, 4], a0), (vec![5, 4], b0)], 1e-6, 1e-9, "matmul_nt", |t, ids| {
        let y = t.matmul_nt(ids[0], ids[1]).unwrap();
        contract(t, y, &u, &w)
    });
}

#[test]
fn grad_add_and_scale() {
    let mut rng = seeded_rng(103);
    let (u, w) = (random_vals(&mut rng, 2), random_vals(&mut rng, 3));
    let a0 = random_vals(&mut rng, 6);
    let b0 = random_vals(&mut rng, 6);
    fd_check(&[(vec![2, 3], a0), (vec![2, 3], b0)], 1e-6, 1e-9, "add+scale", |t, ids| {
        let s = t.add(ids[0], ids[1]).unwrap();
        let y = t.scale(s, -1.7);
        contract(t, y, &u, &w)
    });
}

#[test]
fn grad_add_row_broadcast() {
    let mut rng = seeded_rng(104);
    let (u, w) = (random_vals(&mut rng, 4), random_vals(&mut rng, 3));
    let x0 = random_vals(&mut rng, 12);
    let v0 = random_vals(&mut rng, 3);
    fd_check(
        &[(vec![4, 3], x0), (vec![1, 3], v0)],
        1e-6,
        1e-9,
        "add_row_broadcast",
        |t, ids| {
            let y = t.add_row_broadcast(ids[0], ids[1]).unwrap();
            contract(t, y, &u, &w)
        },
    );
}

#[test]
fn grad_softmax_rows() {
    let mut rng = seeded_rng(105);
    let (u, w) = (random_vals(&mut rng, 3), random_vals(&mut rng, 5));
    let x0 = random_vals(&mut rng, 15);
    fd_check(&[(vec![3, 5], x0)], 1e-6, 1e-9, "softmax_rows", |t, ids| {
        let y = t.softmax_rows(ids[0]).unwrap();
        contract(t, y, &u, &w)
    });
}

#[test]
fn grad_layer_norm_all_inputs() {
    let mut rng = seeded_rng(106);
    let (u, w) = (random_vals(&mut rng, 3), random_vals(&mut rng, 6));
    let x0 = random_vals(&mut rng, 18);
    let g0: Vec<f64> = random_vals(&mut rng, 6).iter().map(|v| 1.0 + 0.3 * v).collect();
    let b0 = random_vals(&mut rng, 6);
    fd_check(
        &[(vec![3, 6], x0), (vec![1, 6], g0), (vec![1, 6], b0)],
        1e-6,
        1e-9,
        "layer_norm",
        |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
            contract(t, y, &u, &w)
        },
    );
}

#[test]
fn grad_gelu() {
    let mut rng = seeded_rng(107);
    let (u, w) = (random_vals(&mut rng, 2), random_vals(&mut rng, 4));
    let x0: Vec<f64> = random_vals(&mut rng, 8).iter().map(|v| 3.0 * v).collect();
    fd_check(&[(vec![2, 4], x0)], 1e-6, 1e-9, "gelu", |t, ids| {
        let y = t.gelu(ids[0]);
        contract(t, y, &u, &w)
    });
}

#[test]
fn grad_slice_concat_select() {
    let mut rng = seeded_rng(108);
    let (u, w) = (random_vals(&mut rng, 1), random_vals(&mut rng, 6));
    let x0 = random_vals(&mut rng, 18);
    fd_check(&[(vec![3, 6], x0)], 1e-6, 1e-9, "slice/concat/select", |t, ids| {
        // split into two slices, swap halves, take a middle row
        let left = t.slice_cols(ids[0], 0, 2).unwrap();
        let right = t.slice_cols(ids[0], 2, 4).unwrap();
        let y = t.concat_cols(&[right, left]).unwrap();
        let r = t.select_row(y, 1).unwrap();
        contract(t, r, &u, &w)
    });
}

#[test]
fn grad_dot_and_logsumexp() {
    let mut rng = seeded_rng(109);
    let a0 = random_vals(&mut rng, 5);
    let b0 = random_vals(&mut rng, 5);
    fd_check(
        &[(vec![1, 5], a0), (vec![1, 5], b0)],
        1e-6,
        1e-9,
        "dot+logsumexp",
        |t, ids| {
            let d = t.dot(ids[0], ids[1]).unwrap();
            let lse = t.logsumexp_row(ids[1]).unwrap();
            let nd = t.scale(d, -1.0);
            let row = t.concat_cols(&[nd, lse]).unwrap();
            t.sum(row)
        },
    );
}

#[test]
fn grad_deep_composition() {
    // A few stacked ops: broadcast add -> layer_norm -> gelu -> matmul
    // -> softmax -> select -> dot. Close to a transformer sublayer.
    let mut rng = seeded_rng(110);
    let x0 = random_vals(&mut rng, 12);
    let v0 = random_vals(&mut rng, 4);
    let w0 = random_vals(&mut rng, 16);
    let g0 = vec![1.0; 4];
    let b0 = vec![0.0; 4];
    let probe = random_vals(&mut rng, 4);
    fd_check(
        &[
            (vec![3, 4], x0),
            (vec![1, 4], v0),
            (vec![4, 4], w0),
            (vec![1, 4], g0),
            (vec![1, 4], b0),
        ],
        1e-5,
        1e-9,
        "deep composition",
        |t, ids| {
            let h = t.add_row_broadcast(ids[0], ids[1]).unwrap();
            let n = t.layer_norm(h, ids[3], ids[4]).unwrap();
            let a = t.gelu(n);
            let m = t.matmul(a, ids[2]).unwrap();
            let s = t.softmax_rows(m).unwrap();
            let r = t.select_row(s, 2).unwrap();
            let p = t.constant(Tensor::new(vec![1, 4], probe.clone()).unwrap());
            t.dot(r, p).unwrap()
        },
    );
}
