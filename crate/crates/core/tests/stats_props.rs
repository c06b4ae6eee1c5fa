mod common;

use common::{apply, random_orthogonal, random_well_conditioned, rel_diff};
use drift_lens::stats::{centroid, covariance, mahalanobis, EmbeddingMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(dim: usize, rows: usize) -> impl Strategy<Value = EmbeddingMatrix> {
    prop::collection::vec(-5.0f32..5.0, dim * rows)
        .prop_map(move |v| EmbeddingMatrix::new(dim, v).unwrap())
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Explicit-inverse Mahalanobis, independent of the Cholesky path.
fn oracle_distance(x: &[f64], y: &[f64], cov: &DMatrix<f64>) -> f64 {
    let inv = cov.clone().try_inverse().expect("invertible");
    let diff = DVector::from_iterator(x.len(), x.iter().zip(y).map(|(a, b)| a - b));
    (diff.transpose() * inv * &diff)[(0, 0)].sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mahalanobis_is_a_symmetric_nonnegative_distance(emb in matrix(4, 12)) {
        let stats = covariance(&emb, 1e-3).unwrap();
        let (x, y) = (f64s(emb.row(0)), f64s(emb.row(1)));
        let dxy = mahalanobis(&x, &y, &stats).unwrap();
        let dyx = mahalanobis(&y, &x, &stats).unwrap();
        prop_assert!(dxy >= 0.0);
        prop_assert!((dxy - dyx).abs() <= 1e-12 * dxy.max(1.0));
        prop_assert_eq!(mahalanobis(&x, &x, &stats).unwrap(), 0.0);
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse(emb in matrix(5, 20)) {
        let stats = covariance(&emb, 1e-3).unwrap();
        for (i, j) in [(0, 1), (2, 7), (3, 19)] {
            let (x, y) = (f64s(emb.row(i)), f64s(emb.row(j)));
            let fast = mahalanobis(&x, &y, &stats).unwrap();
            let slow = oracle_distance(&x, &y, &stats.covariance);
            prop_assert!(rel_diff(fast, slow) < 1e-8, "{fast} vs {slow}");
        }
    }

    #[test]
    fn whitened_rows_reproduce_distances(emb in matrix(3, 10)) {
        let stats = covariance(&emb, 1e-2).unwrap();
        let z = stats.whiten(&emb).unwrap();
        for i in 0..emb.rows() {
            for j in 0..i {
                let direct = mahalanobis(&f64s(emb.row(i)), &f64s(emb.row(j)), &stats).unwrap();
                prop_assert!((z.distance(i, j) - direct).abs() <= 1e-9 * direct.max(1.0));
            }
        }
    }

    #[test]
    fn trace_is_sum_of_coordinate_variances(emb in matrix(6, 9)) {
        let stats = covariance(&emb, 0.0).unwrap();
        let n = emb.rows() as f64;
        let mut expected = 0.0;
        for k in 0..emb.dim() {
            let col: Vec<f64> = emb.iter_rows().map(|r| r[k] as f64).collect();
            let m = col.iter().sum::<f64>() / n;
            expected += col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        }
        prop_assert!((stats.trace() - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn centroid_commutes_with_affine_maps(emb in matrix(4, 8), seed in 0u64..1000) {
        let q = random_orthogonal(4, seed);
        let shift = [1.0, -2.0, 0.5, 3.0];
        let rows: Vec<Vec<f32>> = emb.iter_rows().map(|r| apply(&q, &shift, r)).collect();
        let moved = EmbeddingMatrix::from_rows(4, &rows).unwrap();
        let mu = centroid(&emb).unwrap();
        let mu_f32: Vec<f32> = mu.iter().map(|&v| v as f32).collect();
        let expected = apply(&q, &shift, &mu_f32);
        for (a, b) in centroid(&moved).unwrap().iter().zip(expected) {
            prop_assert!((a - b as f64).abs() < 1e-4);
        }
    }
}

#[test]
fn shared_affine_map_preserves_unshrunk_distances() {
    let dim = 6;
    let mut rows = Vec::new();
    let snap = common::random_snapshot("s", dim, &["O"], 60, 9);
    for r in &snap.records {
        rows.push(r.embedding.clone());
    }
    let emb = EmbeddingMatrix::from_rows(dim, &rows).unwrap();
    let a = random_well_conditioned(dim, 4);
    let shift: Vec<f64> = (0..dim).map(|k| k as f64 - 2.0).collect();
    let moved_rows: Vec<Vec<f32>> = rows.iter().map(|r| apply(&a, &shift, r)).collect();
    let moved = EmbeddingMatrix::from_rows(dim, &moved_rows).unwrap();

    let s0 = covariance(&emb, 0.0).unwrap();
    let s1 = covariance(&moved, 0.0).unwrap();
    let (z0, z1) = (s0.whiten(&emb).unwrap(), s1.whiten(&moved).unwrap());
    for (i, j) in [(0, 1), (5, 40), (17, 59)] {
        assert!(rel_diff(z0.distance(i, j), z1.distance(i, j)) < 1e-4);
    }
}
