use ndarray::{Array2, Array3};
use proptest::prelude::*;
use tnn::check::max_rel_err;
use tnn::toeplitz::{
    build_circulant, causal_matvec_batch, fft_matvec, fft_matvec_batch, matvec_backward, naive_matvec,
};
use tnn::{CirculantStrategy, RelPosCoefficients};

fn strategy() -> impl Strategy<Value = CirculantStrategy> {
    prop_oneof![Just(CirculantStrategy::Paper2n), Just(CirculantStrategy::PaddedPow2)]
}

/// `(n, d, coefficient table, two inputs)`
fn problem() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..48, 1usize..4).prop_flat_map(|(n, d)| {
        let v = || prop::collection::vec(-10.0f64..10.0, n * d);
        (
            Just(n),
            Just(d),
            prop::collection::vec(-10.0f64..10.0, (2 * n - 1) * d),
            v(),
            v(),
        )
    })
}

fn coeffs(n: usize, d: usize, t: Vec<f64>) -> RelPosCoefficients {
    RelPosCoefficients::new(n, Array2::from_shape_vec((2 * n - 1, d), t).unwrap()).unwrap()
}

fn mat(n: usize, d: usize, v: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((n, d), v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fft_agrees_with_direct_sum((n, d, t, x, _) in problem(), s in strategy()) {
        let c = coeffs(n, d, t);
        let x = mat(n, d, x);
        let fast = fft_matvec(&c, x.view(), s).unwrap();
        let slow = naive_matvec(&c, x.view()).unwrap();
        prop_assert!(max_rel_err(&fast, &slow) <= 1e-9);
    }

    #[test]
    fn product_is_linear((n, d, t, x, y) in problem(), a in -3.0f64..3.0, b in -3.0f64..3.0, s in strategy()) {
        let c = coeffs(n, d, t);
        let (x, y) = (mat(n, d, x), mat(n, d, y));
        let combined = fft_matvec(&c, (&x * a + &y * b).view(), s).unwrap();
        let separate = fft_matvec(&c, x.view(), s).unwrap() * a + fft_matvec(&c, y.view(), s).unwrap() * b;
        prop_assert!(max_rel_err(&combined, &separate) <= 1e-9);
    }

    #[test]
    fn circulant_block_is_the_toeplitz_matrix((n, d, t, _, _) in problem(), s in strategy()) {
        let c = coeffs(n, d, t);
        let spec = build_circulant(&c, s).unwrap();
        prop_assert!(spec.embed_size() >= 2 * n - 1);
        for ch in 0..d {
            prop_assert_eq!(spec.top_left_block(n, ch), c.to_dense(ch));
        }
    }

    #[test]
    fn backward_is_the_adjoint((n, d, t, x, g) in problem(), s in strategy()) {
        let c = coeffs(n, d, t);
        let (x, g) = (mat(n, d, x), mat(n, d, g));
        let tx = fft_matvec(&c, x.view(), s).unwrap();
        let (tg, _) = matvec_backward(&c, x.view(), g.view(), s).unwrap();
        let lhs = (&tx * &g).sum();
        let rhs = (&x * &tg).sum();
        let scale = (&tx * &tx).sum().sqrt() * (&g * &g).sum().sqrt() + 1.0;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * scale);
    }

    #[test]
    fn causal_route_matches_batched_fft((n, d, t, x, _) in problem(), s in strategy()) {
        let mut c = coeffs(n, d, t).into_values();
        c.slice_mut(ndarray::s![..n - 1, ..]).fill(0.0);
        let c = RelPosCoefficients::new(n, c).unwrap();
        let x = Array3::from_shape_vec((1, n, d), x).unwrap();
        let causal = causal_matvec_batch(&c, x.view()).unwrap();
        let full = fft_matvec_batch(&c, x.view(), s).unwrap();
        prop_assert!(max_rel_err(&causal, &full) <= 1e-9);
    }
}
