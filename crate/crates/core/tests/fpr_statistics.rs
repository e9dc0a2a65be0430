use lfmark_core::detect::{detection_threshold, fpr, fpr_of_rule, p_value, threshold_for_fpr, tpr_at_fpr};
use proptest::prelude::*;
use statrs::function::beta::beta_reg;
use statrs::function::factorial::ln_binomial;

/// `Σ_{i>τ} C(k, i)` in exact integer arithmetic.
fn tail_count(tau: usize, k: usize) -> u128 {
    let mut c: u128 = 1; // C(k, 0)
    let mut total = 0;
    for i in 0..=k {
        if i > tau {
            total += c;
        }
        c = c * (k - i) as u128 / (i + 1) as u128;
    }
    total
}

/// Exact tail as a correctly scaled float: the only rounding is the
/// conversion of the integer count.
fn exact_fpr(tau: usize, k: usize) -> f64 {
    tail_count(tau, k) as f64 / 2f64.powi(k as i32)
}

fn rel_err(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

#[test]
fn quoted_values() {
    let a = fpr(39, 48).unwrap();
    let b = fpr(41, 48).unwrap();
    assert!(rel_err(a, 1.65e-6) < 0.02, "{a}");
    assert!(rel_err(b, 5.04e-8) < 0.02, "{b}");
}

#[test]
fn matches_integer_oracle_for_k_up_to_64() {
    for k in 1..=64 {
        for tau in 0..=k {
            let got = fpr(tau, k).unwrap();
            let want = exact_fpr(tau, k);
            assert!(rel_err(got, want) < 1e-12, "fpr({tau},{k}) = {got}, oracle {want}");
        }
    }
}

#[test]
fn matches_regularized_incomplete_beta() {
    for k in 1..=64 {
        for tau in 0..k {
            let got = fpr(tau, k).unwrap();
            let beta = beta_reg((tau + 1) as f64, (k - tau) as f64, 0.5);
            // statrs' continued fraction is accurate to about 1e-13 here
            assert!(rel_err(got, beta) < 1e-10, "fpr({tau},{k}) = {got}, I = {beta}");
        }
    }
}

#[test]
fn edge_cases() {
    assert_eq!(fpr(5, 5).unwrap(), 0.0);
    assert_eq!(fpr(0, 1).unwrap(), 0.5);
    assert!(fpr(6, 5).is_err());
    assert!(fpr(0, 0).is_err());
    assert_eq!(threshold_for_fpr(48, 1.0).unwrap(), 0);
    assert_eq!(threshold_for_fpr(1, 0.6).unwrap(), 0);
    assert!(threshold_for_fpr(48, 0.0).is_err());
    assert!(rel_err(p_value(48, 48).unwrap(), 2f64.powi(-48)) < 1e-12);
}

#[test]
fn threshold_against_oracle() {
    let tau = threshold_for_fpr(48, 1e-6).unwrap();
    assert!(exact_fpr(tau, 48) <= 1e-6);
    assert!(exact_fpr(tau - 1, 48) > 1e-6);
    assert_eq!(tau, 40);
}

#[test]
fn tpr_curve_matches_direct_enumeration() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let k = 48;
    let counts: Vec<usize> = (0..500)
        .map(|_| (0..k).filter(|_| rng.random_bool(0.95)).count())
        .collect();
    let grid = [1e-8, 1e-6, 1e-4, 1e-2, 0.1, 1.0];
    let curve = tpr_at_fpr(&counts, k, &grid).unwrap();
    for (pt, &target) in curve.iter().zip(&grid) {
        // smallest rule threshold t with P(M >= t) <= target, by enumeration
        let t = (0..=k + 1)
            .find(|&t| t == 0 && target >= 1.0 || t > 0 && exact_fpr(t - 1, k) <= target)
            .unwrap();
        let tpr = counts.iter().filter(|&&c| c >= t).count() as f64 / counts.len() as f64;
        assert_eq!(pt.threshold, t);
        assert_eq!(pt.tpr, tpr);
    }
    assert!(tpr_at_fpr(&vec![k; 10], k, &[1e-3, 0.5]).unwrap().iter().all(|p| p.tpr == 1.0));
}

proptest! {
    #[test]
    fn strictly_decreasing_and_bounded(k in 1usize..=200) {
        let mut prev = f64::INFINITY;
        for tau in 0..=k {
            let v = fpr(tau, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v <= prev);
            // strict wherever the step P(M = τ) is representable next to prev
            let step = (ln_binomial(k as u64, tau as u64) - k as f64 * std::f64::consts::LN_2).exp();
            if v > 0.0 && tau > 0 && step > 1e-13 * prev {
                prop_assert!(v < prev);
            }
            prev = v;
        }
    }

    #[test]
    fn threshold_inverts_fpr(k in 1usize..=128, exp in -12.0f64..0.0) {
        let target = 10f64.powf(exp);
        let tau = threshold_for_fpr(k, target).unwrap();
        prop_assert!(fpr(tau, k).unwrap() <= target);
        if tau > 0 {
            prop_assert!(fpr(tau - 1, k).unwrap() > target);
        }
        // the rule M >= t keeps its false-positive rate under the target
        let t = detection_threshold(k, target).unwrap();
        prop_assert!(fpr_of_rule(t, k).unwrap() <= target);
    }

    #[test]
    fn p_value_is_the_inclusive_tail(k in 1usize..=64, m in 0usize..=64) {
        let m = m.min(k);
        let want = if m == 0 { 1.0 } else { exact_fpr(m - 1, k) };
        prop_assert!(rel_err(p_value(m, k).unwrap(), want) < 1e-12);
    }
}
