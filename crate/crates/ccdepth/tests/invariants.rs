//! Property-based invariants: ISTA nonnegativity and monotone sparsification,
//! coding-rate orthogonal invariance, softmax normalization, dyadic loss
//! weights, and disparity-to-depth range/monotonicity.

mod common;

use ccdepth::crate_core::{coding_rate, ista_step, Dictionary, TokenMatrix};
use ccdepth::linalg;
use ccdepth::selfsup_loss::{disp_to_depth, total_loss};
use ccdepth::tape::Tape;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn token_matrix(d: usize, n: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-2.0f64..2.0, d * n)
        .prop_map(move |v| Array2::from_shape_vec((d, n), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ista_outputs_are_nonnegative(
        z in token_matrix(5, 6),
        seed in 0u64..1000,
        eta in 0.01f64..0.8,
        lam in 0.0f64..0.8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = Dictionary::new(linalg::random_orthonormal(&mut rng, 5, 5)).unwrap();
        let out = ista_step(&TokenMatrix::new(z).unwrap(), &dict, eta, lam).unwrap();
        prop_assert!(out.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ista_zero_fraction_monotone_in_lambda(
        z in token_matrix(6, 7),
        eta in 0.05f64..0.5,
    ) {
        // with D = I the step is a pure shrinkage: larger lambda1 can only
        // zero out more entries
        let dict = Dictionary::identity(6);
        let tm = TokenMatrix::new(z).unwrap();
        let mut prev_zeros = 0usize;
        for lam in [0.0, 0.1, 0.3, 0.6, 1.0, 2.0] {
            let out = ista_step(&tm, &dict, eta, lam).unwrap();
            let zeros = out.iter().filter(|&&v| v == 0.0).count();
            prop_assert!(zeros >= prev_zeros, "lambda {lam}: {zeros} < {prev_zeros}");
            prev_zeros = zeros;
        }
    }

    #[test]
    fn coding_rate_invariant_under_orthogonal_maps(
        z in token_matrix(4, 6),
        seed in 0u64..1000,
        eps in 0.3f64..1.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = linalg::random_orthonormal(&mut rng, 4, 4);
        let qz = q.dot(&z);
        let r1 = coding_rate(&z, eps).unwrap();
        let r2 = coding_rate(&qz, eps).unwrap();
        prop_assert!((r1 - r2).abs() < 1e-8, "{r1} vs {r2}");
    }

    #[test]
    fn softmax_columns_sum_to_one(z in token_matrix(5, 5)) {
        let mut t = Tape::new();
        let v = t.leaf2(z);
        let s = t.softmax_cols(v);
        let sv = t.value2(s);
        for j in 0..sv.ncols() {
            let col: f64 = (0..sv.nrows()).map(|i| sv[[i, j]]).sum();
            prop_assert!((col - 1.0).abs() < 1e-12);
            prop_assert!((0..sv.nrows()).all(|i| sv[[i, j]] >= 0.0));
        }
    }

    #[test]
    fn total_loss_uses_dyadic_weights(
        l1 in 0.0f64..2.0,
        l2 in 0.0f64..2.0,
        l3 in 0.0f64..2.0,
        l4 in 0.0f64..2.0,
    ) {
        let total = total_loss(&[l1, l2, l3, l4]).unwrap();
        let manual = l1 + l2 / 2.0 + l3 / 4.0 + l4 / 8.0;
        prop_assert!((total - manual).abs() < 1e-12);
    }

    #[test]
    fn disp_to_depth_stays_in_range_and_is_monotone(
        d1 in 0.001f64..0.999,
        d2 in 0.001f64..0.999,
    ) {
        let disp = Array2::from_shape_vec((1, 2), vec![d1, d2]).unwrap();
        let depth = disp_to_depth(&disp, 0.1, 100.0).unwrap();
        for &v in depth.data.iter() {
            prop_assert!((0.1..=100.0).contains(&v));
        }
        // higher disparity means closer (smaller depth)
        if d1 < d2 {
            prop_assert!(depth.data[[0, 0]] > depth.data[[0, 1]]);
        }
    }
}
