mod common;

use common::*;
use intentive::numcore::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded_rng(seed);
        let vals: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-30.0..30.0))
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], vals).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.data(y).chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            for v in row {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn frozen_leaves_never_receive_gradients(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let a0 = random_vals(&mut rng, 6);
        let b0 = random_vals(&mut rng, 6);
        let mut tape = Tape::new();
        let frozen = tape.constant(Tensor::new(vec![2, 3], a0).unwrap());
        let live = tape.leaf(Tensor::new(vec![2, 3], b0).unwrap().with_grad());
        let s = tape.add(frozen, live).unwrap();
        let n = tape.gelu(s);
        let root = tape.sum(n);
        tape.backward(root).unwrap();
        prop_assert!(tape.grad(frozen).is_none());
        prop_assert!(tape.grad(live).is_some());
    }

    #[test]
    fn random_composition_gradients_match_fd(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let n = rng.random_range(1usize..4);
        let d = rng.random_range(2usize..6);
        let x0 = random_vals(&mut rng, n * d);
        let w0 = random_vals(&mut rng, d * d);
        let u = random_vals(&mut rng, n);
        let w = random_vals(&mut rng, d);
        fd_check(
            &[(vec![n, d], x0), (vec![d, d], w0)],
            1e-5,
            1e-8,
            "random composition",
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]).unwrap();
                let g = t.gelu(m);
                let s = t.softmax_rows(g).unwrap();
                let uc = t.constant(Tensor::new(vec![1, n], u.clone()).unwrap());
                let wc = t.constant(Tensor::new(vec![d, 1], w.clone()).unwrap());
                let uy = t.matmul(uc, s).unwrap();
                let sc = t.matmul(uy, wc).unwrap();
                t.sum(sc)
            },
        );
    }
}
