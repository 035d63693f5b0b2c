use elp_core::metrics::{
    frechet_distance, pcc, shannon_diversity, sts_distance, variation_diversity, wtlcc, FdMode,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn series(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, len)
}

fn non_constant(v: &[f64]) -> bool {
    v.iter().any(|&a| (a - v[0]).abs() > 1e-3)
}

fn pair(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| (prop::collection::vec(-5.0..5.0f64, n), prop::collection::vec(-5.0..5.0f64, n)))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn pcc_is_symmetric_and_affine_invariant(
        (x, y) in pair(3..40),
        a in 0.1..10.0f64,
        b in -10.0..10.0f64,
    ) {
        prop_assume!(non_constant(&x) && non_constant(&y));
        let r = pcc(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - pcc(&y, &x).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((r - pcc(&scaled, &y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn wtlcc_of_a_series_with_itself_is_one(x in series(12..60), lag in 0usize..4) {
        let window = x.len().min(12);
        // Every window must vary for the self-correlation to be defined.
        let stride = window / 2;
        let mut s = 0;
        while s + window <= x.len() {
            prop_assume!(non_constant(&x[s..s + window]));
            s += stride;
        }
        let v = wtlcc(&x, &x, window, lag.min(window - 1)).unwrap();
        prop_assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn wtlcc_without_lag_over_one_window_is_pcc((x, y) in pair(3..50)) {
        let v = wtlcc(&x, &y, x.len(), 0).unwrap();
        prop_assert!((v - pcc(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sts_is_a_pseudo_metric(
        x in matrix(8, 3),
        y in matrix(8, 3),
        z in matrix(8, 3),
        offset in -4.0..4.0f64,
    ) {
        let d = |a: &Array2<f64>, b: &Array2<f64>| sts_distance(a.view(), b.view()).unwrap();
        prop_assert!(d(&x, &y) >= 0.0);
        prop_assert!((d(&x, &y) - d(&y, &x)).abs() < 1e-12);
        prop_assert!(d(&x, &(&x + offset)) < 1e-12);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
    }

    #[test]
    fn shannon_diversity_stays_in_zero_to_ln_k(
        gen in matrix(30, 2),
        reference in matrix(25, 2),
        k in 1usize..8,
        seed in 0u64..1000,
    ) {
        let v = shannon_diversity(gen.view(), reference.view(), k, seed).unwrap();
        prop_assert!(v >= 0.0 && v <= (k as f64).ln() + 1e-12, "{v} for k={k}");
    }

    #[test]
    fn variation_diversity_is_shift_invariant(x in matrix(10, 4), shift in -5.0..5.0f64) {
        let a = variation_diversity(&[x.view()]).unwrap();
        let shifted = &x + shift;
        let b = variation_diversity(&[shifted.view()]).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn shannon_diversity_hits_its_bounds() {
    let reference = Array2::from_shape_vec((6, 1), vec![0.0, 0.0, 10.0, 10.0, 20.0, 20.0]).unwrap();
    let same = Array2::from_elem((9, 1), 10.0);
    assert_eq!(shannon_diversity(same.view(), reference.view(), 3, 1).unwrap(), 0.0);
    let spread = Array2::from_shape_vec((3, 1), vec![0.0, 10.0, 20.0]).unwrap();
    let v = shannon_diversity(spread.view(), reference.view(), 3, 1).unwrap();
    assert!((v - 3f64.ln()).abs() < 1e-12);
}

fn gaussian_frames(n: usize, d: usize, mean: &[f64], seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |(_, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        mean[j] + z
    })
}

#[test]
fn gaussian_fd_of_resampled_sets_is_small() {
    let mean = vec![0.5; 8];
    let a = gaussian_frames(10_000, 8, &mean, 1);
    let b = gaussian_frames(10_000, 8, &mean, 2);
    let fd = frechet_distance(a.view(), b.view(), FdMode::Gaussian).unwrap();
    assert!(fd.value < 0.05, "{fd:?}");
}

#[test]
fn gaussian_fd_of_identical_sets_is_zero_in_both_modes() {
    let a = gaussian_frames(200, 4, &[0.0; 4], 3);
    for mode in [FdMode::Gaussian, FdMode::L1] {
        let fd = frechet_distance(a.view(), a.view(), mode).unwrap();
        assert!(fd.value.abs() < 1e-9, "{mode:?}: {fd:?}");
    }
}
