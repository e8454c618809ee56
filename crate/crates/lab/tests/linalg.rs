//! The core's Jacobi eigensolver against nalgebra.

use icq_core::diagnostics::feature_covariance;
use icq_core::linalg::{sym_eigen, Matrix};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigenvalues_match_nalgebra(n in 1usize..9, entries in prop::collection::vec(-3.0f64..3.0, 81)) {
        let mut a = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let x = entries[i * 9 + j];
                a.set(i, j, x);
                a.set(j, i, x);
            }
        }
        let ours = sym_eigen(&a);
        let theirs = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &a.data));
        let mut want: Vec<f64> = theirs.eigenvalues.iter().copied().collect();
        want.sort_by(f64::total_cmp);
        for (x, y) in ours.values.iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", ours.values, want);
        }
        // A v = lambda v for every returned pair
        for k in 0..n {
            for i in 0..n {
                let av: f64 = (0..n).map(|j| a.get(i, j) * ours.vectors.get(j, k)).sum();
                prop_assert!((av - ours.values[k] * ours.vectors.get(i, k)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn covariance_spectrum_matches_nalgebra(
        k in 1usize..12,
        d in 1usize..6,
        raw in prop::collection::vec(-1.0f64..1.0, 72),
        w in prop::collection::vec(0.0f64..1.0, 12),
    ) {
        let features: Vec<Vec<f64>> = (0..k).map(|r| raw[r * 6..r * 6 + d].to_vec()).collect();
        let total: f64 = w[..k].iter().sum::<f64>().max(1e-9);
        let mu: Vec<f64> = w[..k].iter().map(|x| x / total).collect();
        let fc = feature_covariance(&features, &mu).unwrap();
        let mut sigma = DMatrix::<f64>::zeros(d, d);
        for (g, m) in features.iter().zip(&mu) {
            let v = nalgebra::DVector::from_column_slice(g);
            sigma += &v * v.transpose() * *m;
        }
        let ev = SymmetricEigen::new(sigma).eigenvalues;
        let max = ev.iter().copied().fold(0.0, f64::max);
        prop_assert!((fc.lambda_max - max).abs() < 1e-9);
        let nonzero: Vec<f64> = ev.iter().copied().filter(|v| *v > 1e-12 * max).collect();
        prop_assert_eq!(fc.rank, nonzero.len());
        if let Some(min) = nonzero.iter().copied().reduce(f64::min) {
            prop_assert!((fc.lambda0 - min).abs() < 1e-9);
        }
    }
}
