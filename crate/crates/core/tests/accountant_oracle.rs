//! The accountant's per-step RDP values checked against a high-precision
//! direct-sum oracle (see `common::oracle_rdp`), plus independent
//! recomputations of the order-minimizing conversion.

mod common;

use fedsynth_core::privacy::{
    calibrate_noise, compose_epsilon, default_orders, rdp_subsampled_gaussian, rdp_to_dp,
};

const ALPHAS: std::ops::RangeInclusive<u32> = 2..=32;
const QS: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
const SIGMAS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[test]
fn subsampled_gaussian_matches_the_fixed_point_oracle() {
    let mut worst = (0.0f64, 0u32, 0.0f64, 0.0f64);
    for &q in &QS {
        for &sigma in &SIGMAS {
            for alpha in ALPHAS {
                let got = rdp_subsampled_gaussian(q, sigma, alpha).unwrap();
                let want = common::oracle_rdp(q, sigma, alpha);
                assert!(want > 0.0, "oracle must be positive for q > 0");
                let rel = (got - want).abs() / want;
                if rel > worst.0 {
                    worst = (rel, alpha, q, sigma);
                }
                assert!(
                    rel <= 1e-10,
                    "alpha={alpha} q={q} sigma={sigma}: got {got:.17e}, oracle {want:.17e}, rel {rel:.3e}"
                );
            }
        }
    }
    // The grid covers 496 points; make sure the loop really ran.
    assert!(worst.0 > 0.0 || worst.1 == 0, "worst observed: {worst:?}");
}

#[test]
fn full_sampling_matches_the_plain_gaussian_closed_form() {
    for &sigma in &SIGMAS {
        for alpha in ALPHAS {
            let got = rdp_subsampled_gaussian(1.0, sigma, alpha).unwrap();
            let want = alpha as f64 / (2.0 * sigma * sigma);
            assert!(
                (got - want).abs() <= 1e-12 * want,
                "alpha={alpha} sigma={sigma}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn oracle_agrees_with_the_alpha_two_closed_form() {
    // Sanity check of the oracle itself against an independently derivable
    // special case: alpha=2 gives ln(1 + q^2 (e^(1/sigma^2) - 1)).
    for &q in &[0.01f64, 0.1] {
        for &sigma in &[1.0f64, 2.0] {
            let want = (q * q * ((1.0 / (sigma * sigma)).exp() - 1.0)).ln_1p();
            let got = common::oracle_rdp(q, sigma, 2);
            assert!(
                (got - want).abs() <= 1e-12 * want.max(1e-300),
                "q={q} sigma={sigma}: oracle {got} vs closed form {want}"
            );
        }
    }
}

#[test]
fn conversion_minimizes_over_orders() {
    // Recompute epsilon = min_alpha [rdp + ln(1/delta)/(alpha-1)] by hand.
    let orders = default_orders();
    let delta = 1e-4f64;
    let steps = 1200u64;
    let (q, sigma) = (0.02, 1.3);
    let rdp: Vec<f64> = orders
        .iter()
        .map(|&a| steps as f64 * rdp_subsampled_gaussian(q, sigma, a).unwrap())
        .collect();
    let mut want = f64::INFINITY;
    let mut want_order = 0u32;
    for (r, &a) in rdp.iter().zip(&orders) {
        let eps = r + (1.0 / delta).ln() / (a as f64 - 1.0);
        if eps < want {
            want = eps;
            want_order = a;
        }
    }
    let (eps, order) = rdp_to_dp(&rdp, &orders, delta).unwrap();
    assert!((eps - want).abs() <= 1e-12 * want);
    assert_eq!(order, want_order);
    let (composed, composed_order) = compose_epsilon(q, sigma, steps, delta, &orders).unwrap();
    assert!((composed - want).abs() <= 1e-12 * want);
    assert_eq!(composed_order, want_order);
}

#[test]
fn calibration_lands_just_under_the_target() {
    let orders = default_orders();
    for &(eps_target, q, steps) in &[(1.0, 0.05, 2500u64), (1.0, 0.01, 500), (8.0, 0.1, 1000)] {
        let sigma = calibrate_noise(eps_target, 1e-4, q, steps, &orders).unwrap();
        let achieved = compose_epsilon(q, sigma, steps, 1e-4, &orders).unwrap().0;
        assert!(
            achieved <= eps_target && achieved >= 0.999 * eps_target,
            "target {eps_target} q={q} steps={steps}: sigma {sigma} achieves {achieved}"
        );
    }
}
