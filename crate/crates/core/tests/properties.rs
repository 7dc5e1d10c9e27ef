//! Randomized invariants.

use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use ifpca_core::data::{load_matrix, normalize_columns, write_matrix, DataMatrix, SdMode};
use ifpca_core::metrics::{ari, clustering_error, fractional_ranks, regret_and_rank, ErrorTable};
use ifpca_core::rareweak::{generate_instance, hamming_error, RareWeakConfig};
use ifpca_core::rng::{derive_path, derive_seed};
use ifpca_core::scoring::{ks_score, ChiSquareScores};
use ifpca_core::selection::{fixed_threshold_select, hct, top_m_select, HcVariant};
use ifpca_core::spectral::{kmeans, truncated_svd, KmeansConfig};

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = DMatrix<f64>> {
    (rows, cols).prop_flat_map(|(n, p)| {
        prop::collection::vec(-50.0..50.0_f64, n * p).prop_map(move |v| DMatrix::from_vec(n, p, v))
    })
}

fn labels(k: usize, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1..=k, len)
}

fn signs(len: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1i8 } else { -1 }), len)
}

/// Label permutation applied as `perm[label - 1]`.
fn relabel(y: &[usize], perm: &[usize]) -> Vec<usize> {
    y.iter().map(|&l| perm[l - 1]).collect()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_idempotent(m in matrix(3..20, 1..8)) {
        let x = DataMatrix::new(m).unwrap();
        let once = normalize_columns(&x, SdMode::Sample).unwrap();
        let twice = normalize_columns(&DataMatrix::new(once.values.clone()).unwrap(), SdMode::Sample).unwrap();
        prop_assert!(close(&once.values, &twice.values, 1e-10));
    }

    #[test]
    fn normalization_ignores_column_shift_and_scale(
        m in matrix(3..20, 1..8),
        shift in -100.0..100.0_f64,
        scale in 0.01..100.0_f64,
        col in 0usize..8,
    ) {
        let col = col % m.ncols();
        let mut moved = m.clone();
        moved.column_mut(col).apply(|v| *v = *v * scale + shift);
        let a = normalize_columns(&DataMatrix::new(m).unwrap(), SdMode::Sample).unwrap();
        let b = normalize_columns(&DataMatrix::new(moved).unwrap(), SdMode::Sample).unwrap();
        prop_assert_eq!(&a.retained, &b.retained);
        prop_assert!(close(&a.values, &b.values, 1e-10));
    }

    #[test]
    fn ks_score_ignores_location_and_scale(
        z in prop::collection::vec(-10.0..10.0_f64, 5..60),
        shift in -100.0..100.0_f64,
        scale in 0.01..100.0_f64,
    ) {
        let normal = Normal::standard();
        let cdf = |t: f64| normal.cdf(t);
        let base = ks_score(&z, &cdf);
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        let moved: Vec<f64> = z.iter().map(|v| v * scale + shift).collect();
        prop_assert!((ks_score(&moved, &cdf).unwrap() - base).abs() < 1e-9);
        prop_assert!(base >= 0.0 && base <= (z.len() as f64).sqrt());
    }

    #[test]
    fn hct_depends_only_on_values(
        pv in prop::collection::vec(0.0..1.0_f64, 4..200),
        n in 2usize..500,
        shuffle_seed in any::<u64>(),
        binomial in any::<bool>(),
    ) {
        let variant = if binomial { HcVariant::Binomial } else { HcVariant::AsPrinted };
        let mut perm: Vec<usize> = (0..pv.len()).collect();
        let mut s = shuffle_seed;
        for i in (1..perm.len()).rev() {
            s = derive_seed(s, i as u64);
            perm.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let shuffled: Vec<f64> = perm.iter().map(|&i| pv[i]).collect();
        let a = hct(&pv, n, variant).unwrap();
        let b = hct(&shuffled, n, variant).unwrap();
        prop_assert_eq!(a.threshold, b.threshold);
        prop_assert_eq!(a.j_hat, b.j_hat);
        let mut mapped: Vec<usize> = b.retained.iter().map(|&i| perm[i]).collect();
        mapped.sort_unstable();
        let mut direct = a.retained.clone();
        direct.sort_unstable();
        prop_assert_eq!(mapped, direct);
    }

    #[test]
    fn hct_retains_exactly_the_values_at_or_below_threshold(
        pv in prop::collection::vec(0.0..1.0_f64, 4..200),
        n in 2usize..500,
    ) {
        let r = hct(&pv, n, HcVariant::AsPrinted).unwrap();
        prop_assert!(!r.retained.is_empty());
        if !r.fallback_used {
            let mut expected: Vec<usize> = (0..pv.len()).filter(|&j| pv[j] <= r.threshold).collect();
            expected.sort_unstable();
            let mut got = r.retained.clone();
            got.sort_unstable();
            prop_assert_eq!(got, expected);
        }
    }

    #[test]
    fn raising_a_pvalue_never_raises_hc_scores_below_it(
        pv in prop::collection::vec(0.0..1.0_f64, 4..200),
        n in 2usize..500,
        pick in any::<prop::sample::Index>(),
        bump in 0.0..1.0_f64,
    ) {
        let before = hct(&pv, n, HcVariant::AsPrinted).unwrap();
        let j = pick.index(pv.len());
        let mut raised = pv.clone();
        raised[j] = (pv[j] + bump).min(1.0);
        let after = hct(&raised, n, HcVariant::AsPrinted).unwrap();
        for (a, b) in after.hc_curve.iter().zip(&before.hc_curve) {
            if a.is_finite() && b.is_finite() {
                prop_assert!(*a <= *b + 1e-12);
            }
        }
    }

    #[test]
    fn fixed_threshold_shrinks_as_p_grows(
        scores in prop::collection::vec(-3.0..8.0_f64, 1..100),
        p in 2.0..1e4_f64,
        factor in 1.0..100.0_f64,
    ) {
        let chi = ChiSquareScores { scores, n: 10 };
        let small = fixed_threshold_select(&chi, p);
        let large = fixed_threshold_select(&chi, p * factor);
        prop_assert!(large.indices.iter().all(|j| small.indices.contains(j)));
    }

    #[test]
    fn top_m_keeps_the_largest(scores in prop::collection::vec(-5.0..5.0_f64, 1..80), m_frac in 0.0..1.0_f64) {
        let m = 1 + ((scores.len() - 1) as f64 * m_frac) as usize;
        let set = top_m_select(&scores, m).unwrap();
        prop_assert_eq!(set.len(), m);
        prop_assert!(set.indices.windows(2).all(|w| w[0] < w[1]));
        let worst_kept = set.indices.iter().map(|&j| scores[j]).fold(f64::INFINITY, f64::min);
        for j in (0..scores.len()).filter(|j| !set.indices.contains(j)) {
            prop_assert!(scores[j] <= worst_kept);
        }
    }

    #[test]
    fn hamming_is_symmetric_flip_invariant_and_bounded(pair in (1usize..60).prop_flat_map(|n| (signs(n), signs(n)))) {
        let (a, b) = pair;
        let h = hamming_error(&a, &b).unwrap();
        prop_assert_eq!(h, hamming_error(&b, &a).unwrap());
        let flip = |v: &[i8]| v.iter().map(|s| -s).collect::<Vec<i8>>();
        prop_assert_eq!(h, hamming_error(&flip(&a), &flip(&b)).unwrap());
        prop_assert_eq!(h, hamming_error(&flip(&a), &b).unwrap());
        prop_assert!(h <= 0.5);
        prop_assert_eq!(hamming_error(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn clustering_error_ignores_common_relabeling(
        pair in (1usize..80).prop_flat_map(|n| (labels(4, n..n + 1), labels(4, n..n + 1))),
        perm in Just(vec![1usize, 2, 3, 4]).prop_shuffle(),
        other in Just(vec![1usize, 2, 3, 4]).prop_shuffle(),
    ) {
        let (y_hat, y) = pair;
        let base = clustering_error(&y_hat, &y, 4).unwrap();
        let both = clustering_error(&relabel(&y_hat, &perm), &relabel(&y, &perm), 4).unwrap();
        prop_assert_eq!(base.error_count, both.error_count);
        // Predicted labels are only defined up to permutation.
        let pred_only = clustering_error(&relabel(&y_hat, &other), &y, 4).unwrap();
        prop_assert_eq!(base.error_count, pred_only.error_count);
        prop_assert!((base.ari - pred_only.ari).abs() < 1e-12);
        prop_assert!((base.accuracy - (1.0 - base.error_count as f64 / y.len() as f64)).abs() < 1e-15);
    }

    #[test]
    fn ari_of_a_partition_with_itself_is_one(y in labels(5, 2..60)) {
        let distinct = y.iter().collect::<std::collections::BTreeSet<_>>().len();
        prop_assume!(distinct >= 2);
        prop_assert!((ari(&y, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_sum_to_the_triangle_number(values in prop::collection::vec(0u8..6, 1..15)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let r = fractional_ranks(&v);
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn regret_stays_in_the_unit_interval(
        table in (2usize..9, 1usize..6).prop_flat_map(|(m, d)| {
            prop::collection::vec(prop::collection::vec(0u16..60, d), m)
        }),
    ) {
        let methods: Vec<String> = (0..table.len()).map(|i| format!("m{i}")).collect();
        let datasets: Vec<String> = (0..table[0].len()).map(|i| format!("d{i}")).collect();
        let errors: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|&e| e as f64).collect()).collect();
        let t = ErrorTable { methods, datasets, errors };
        let rep = regret_and_rank(&t).unwrap();
        let m = t.methods.len() as f64;
        for d in 0..t.datasets.len() {
            let sum: f64 = rep.ranks.iter().map(|row| row[d]).sum();
            prop_assert!((sum - m * (m + 1.0) / 2.0).abs() < 1e-9);
            for row in &rep.regrets {
                if let Some(r) = row[d] {
                    prop_assert!((0.0..=1.0).contains(&r));
                }
            }
        }
    }

    #[test]
    fn derived_seeds_are_deterministic_and_distinct(base in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assert_eq!(derive_seed(base, a), derive_seed(base, a));
        if a != b {
            prop_assert_ne!(derive_seed(base, a), derive_seed(base, b));
        }
        prop_assert_eq!(derive_path(base, &[a, b]), derive_seed(derive_seed(base, a), b));
    }

    #[test]
    fn matrix_write_load_round_trip(m in matrix(2..12, 1..6), header in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let x = DataMatrix::new(m).unwrap();
        write_matrix(&path, &x, header).unwrap();
        let back = load_matrix(&path, false, header).unwrap();
        prop_assert_eq!(back.values(), x.values());
        if header {
            prop_assert_eq!(back.feature_ids(), x.feature_ids());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn svd_of_transpose_has_the_same_spectrum(m in matrix(3..15, 3..15), k_frac in 0.0..1.0_f64) {
        let k = 1 + ((m.nrows().min(m.ncols()) - 1) as f64 * k_frac) as usize;
        let a = truncated_svd(&m, k).unwrap();
        let b = truncated_svd(&m.transpose(), k).unwrap();
        let scale = a.singular_values[0].max(1.0);
        for (x, y) in a.singular_values.iter().zip(&b.singular_values) {
            prop_assert!((x - y).abs() < 1e-8 * scale, "{x} vs {y}");
        }
        prop_assert_eq!(&truncated_svd(&m, k).unwrap(), &a);
    }

    #[test]
    fn kmeans_partition_survives_rotation(
        m in matrix(6..30, 2..4),
        angle in 0.0..std::f64::consts::TAU,
        seed in any::<u64>(),
    ) {
        // Rotate within the first two coordinates.
        let (c, s) = (angle.cos(), angle.sin());
        let mut rot = DMatrix::<f64>::identity(m.ncols(), m.ncols());
        rot[(0, 0)] = c;
        rot[(0, 1)] = -s;
        rot[(1, 0)] = s;
        rot[(1, 1)] = c;
        let rotated = &m * rot.transpose();
        let cfg = KmeansConfig { restarts: 10, max_iter: 100 };
        let a = kmeans(&m, 2, cfg, seed).unwrap();
        let b = kmeans(&rotated, 2, cfg, seed).unwrap();
        prop_assert_eq!(clustering_error(&a.labels, &b.labels, 2).unwrap().error_count, 0);
    }

    #[test]
    fn more_restarts_never_hurt(m in matrix(6..30, 1..4), seed in any::<u64>(), k in 2usize..4) {
        let few = kmeans(&m, k, KmeansConfig { restarts: 3, max_iter: 100 }, seed).unwrap();
        let many = kmeans(&m, k, KmeansConfig { restarts: 12, max_iter: 100 }, seed).unwrap();
        prop_assert!(many.objective <= few.objective + 1e-9);
    }

    #[test]
    fn instances_reproduce_from_their_seed(seed in any::<u64>(), beta in 0.1..0.9_f64, alpha in 0.05..0.45_f64) {
        let c = RareWeakConfig { n: Some(20), ..RareWeakConfig::new(300, 0.6, beta, alpha, seed) };
        let a = generate_instance(&c).unwrap();
        let b = generate_instance(&c).unwrap();
        prop_assert_eq!(a.x, b.x);
        prop_assert_eq!(a.y, b.y);
        prop_assert_eq!(a.support, b.support);
    }
}
