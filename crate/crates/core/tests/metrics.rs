use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unifiq_core::metrics::{average_ranks, mean_std, plcc, srocc, srocc_from_ranks};
use unifiq_core::Error;

/// Textbook Pearson computed from raw sums, kept separate from the library
/// implementation.
fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn plcc_hand_example() {
    // Σx=6, Σy=7, Σxy=17, Σx²=14, Σy²=21, n=3:
    // (51−42) / (√(42−36)·√(63−49)) = 9/√84
    let r = plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
    assert!((r - 9.0 / 84f64.sqrt()).abs() < 1e-12);
    assert!((r - 0.9820).abs() < 1e-4);
}

#[test]
fn srocc_rank_example() {
    let r = srocc(&[5.0, 4.0, 3.0, 1.0, 2.0], &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
    assert_eq!(r, 0.9);
}

#[test]
fn srocc_with_ties_uses_average_ranks() {
    let x = [1.0, 2.0, 2.0, 3.0];
    let y = [1.0, 2.0, 3.0, 4.0];
    let expected = pearson_oracle(&[1.0, 2.5, 2.5, 4.0], &[1.0, 2.0, 3.0, 4.0]);
    assert!((srocc(&x, &y).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn srocc_formula_matches_pearson_on_ranks_for_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..100 {
        let n = 5 + trial % 40;
        let a: Vec<f64> = (1..=n).map(|v| v as f64).collect();
        let mut b = a.clone();
        b.shuffle(&mut rng);
        let fast = srocc_from_ranks(&a, &b);
        assert!((fast - pearson_oracle(&a, &b)).abs() < 1e-9, "trial {trial}");
        assert!((srocc(&a, &b).unwrap() - fast).abs() < 1e-12);
    }
}

#[test]
fn degenerate_inputs_are_errors() {
    assert!(matches!(
        plcc(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
        Err(Error::Degenerate(_))
    ));
    assert!(matches!(
        srocc(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]),
        Err(Error::Degenerate(_))
    ));
    assert!(matches!(plcc(&[1.0, f64::NAN], &[1.0, 2.0]), Err(Error::Degenerate(_))));
    assert!(matches!(srocc(&[1.0], &[1.0]), Err(Error::Contract(_))));
    assert!(mean_std(&[]).is_err());
}

fn distinct_series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-1e3f64..1e3, n),
            prop::collection::vec(-1e3f64..1e3, n),
        )
    })
}

fn has_spread(v: &[f64]) -> bool {
    v.iter().any(|&a| (a - v[0]).abs() > 1e-6)
}

proptest! {
    #[test]
    fn plcc_matches_oracle_and_range((x, y) in distinct_series()) {
        prop_assume!(has_spread(&x) && has_spread(&y));
        let r = plcc(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - pearson_oracle(&x, &y)).abs() < 1e-9);
    }

    #[test]
    fn plcc_is_affine_invariant((x, y) in distinct_series(), a in 0.01f64..100.0, b in -100f64..100.0) {
        prop_assume!(has_spread(&x) && has_spread(&y));
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((plcc(&moved, &y).unwrap() - plcc(&x, &y).unwrap()).abs() < 1e-6);
        let flipped: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
        prop_assert!((plcc(&flipped, &y).unwrap() + plcc(&x, &y).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn srocc_is_monotone_invariant((x, y) in distinct_series()) {
        prop_assume!(has_spread(&x) && has_spread(&y));
        let r = srocc(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&r));
        let squashed: Vec<f64> = x.iter().map(|v| (v / 500.0).exp()).collect();
        prop_assume!(average_ranks(&squashed) == average_ranks(&x));
        prop_assert!((srocc(&squashed, &y).unwrap() - r).abs() < 1e-12);
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v - 7.0).collect();
        prop_assert!((srocc(&cubed, &y).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn average_ranks_sum_is_triangular(x in prop::collection::vec(-5i32..5, 1..40)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let ranks = average_ranks(&x);
        let n = x.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..x.len() {
            for j in 0..x.len() {
                if x[i] < x[j] {
                    prop_assert!(ranks[i] < ranks[j]);
                }
                if x[i] == x[j] {
                    prop_assert_eq!(ranks[i], ranks[j]);
                }
            }
        }
    }

    #[test]
    fn mean_std_matches_two_pass(v in prop::collection::vec(-1e3f64..1e3, 2..50)) {
        let (m, s) = mean_std(&v).unwrap();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((m - mean).abs() < 1e-9);
        prop_assert!((s - var.sqrt()).abs() < 1e-9);
    }
}
