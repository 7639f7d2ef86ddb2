use proptest::prelude::*;
use rwalk_core::classify::{decide, Divergence, Regime};
use rwalk_core::fit::{fit_exponent, FitOptions};
use rwalk_core::green::green_derivative;
use rwalk_core::measures::{lazify, power_sequence};
use rwalk_core::oracles::{dense_convolution, synthetic_series};
use rwalk_core::{GroupElement, GroupSpec, SparseMeasure};

/// Symmetric probability measure on `Z^2` from weights on a few steps.
fn symmetric_z2(weights: &[f64]) -> SparseMeasure {
    let steps = [[1, 0], [0, 1], [1, 1], [2, -1], [0, 0]];
    let total: f64 = weights.iter().sum::<f64>() * 2.0;
    let mut entries = Vec::new();
    for (s, &w) in steps.iter().zip(weights) {
        let p = w / total;
        entries.push((GroupElement::lattice(s), p));
        entries.push((GroupElement::lattice(&[-s[0], -s[1]]), p));
    }
    SparseMeasure::new(GroupSpec::lattice(2), entries).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn engine_matches_dense_oracle(weights in prop::collection::vec(0.1f64..1.0, 5)) {
        let mu = symmetric_z2(&weights);
        let sparse = power_sequence(&mu, 24, 0.0).unwrap();
        let dense = dense_convolution(&mu, 24).unwrap();
        for (a, b) in sparse.rows.iter().zip(&dense.rows) {
            prop_assert!((a.value() - b.value()).abs() <= 1e-13 * b.value().max(1e-300));
        }
    }

    #[test]
    fn even_returns_do_not_increase(weights in prop::collection::vec(0.1f64..1.0, 5)) {
        // a_{2n} = |mu^(n)|^2 is non-increasing for symmetric mu
        let s = power_sequence(&symmetric_z2(&weights), 40, 0.0).unwrap();
        let evens: Vec<f64> = s.even().map(|r| r.a).collect();
        for w in evens.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        prop_assert!(s.rows.iter().all(|r| r.a <= 1.0 + 1e-15));
    }

    #[test]
    fn green_is_increasing_in_r(r1 in 0.0f64..0.95, dr in 0.0f64..0.04) {
        let s = power_sequence(&SparseMeasure::simple_random_walk(GroupSpec::lattice(1)), 3000, 0.0).unwrap();
        let a = green_derivative(&s, r1, 0).unwrap();
        let b = green_derivative(&s, r1 + dr, 0).unwrap();
        prop_assert!(a.value <= b.value + a.uncertainty() + b.uncertainty());
    }

    #[test]
    fn exponent_ignores_exponential_rate(rho in 0.5f64..1.0, alpha in 0.5f64..3.0) {
        let base = synthetic_series(1.0, alpha, 0.0, 4000);
        let tilted = synthetic_series(rho, alpha, 0.0, 4000);
        let o = FitOptions::default();
        let fa = fit_exponent(&base, 1.0, &o).unwrap();
        let fb = fit_exponent(&tilted, rho, &o).unwrap();
        prop_assert!((fa.alpha - fb.alpha).abs() < 1e-6);
        prop_assert!((fa.alpha - alpha).abs() < 0.02);
    }

    #[test]
    fn small_rank_is_always_rejected(d in 0u32..=4, extra in prop::collection::vec(0u32..12, 0..3)) {
        let mut dims = extra.clone();
        dims.push(d);
        for div in [Divergence::Divergent, Divergence::Convergent, Divergence::Inconclusive] {
            let dec = decide(div, &dims);
            prop_assert_eq!(dec.regime, Regime::Inconsistent);
            prop_assert!(dec.predicted.is_none());
        }
    }

    #[test]
    fn lazy_walk_returns_dominate(n in 1usize..60) {
        // (mu + delta)/2 returns at n with probability sum_j C(n, j) 2^-n a_j
        let mu = SparseMeasure::simple_random_walk(GroupSpec::lattice(1));
        let plain = power_sequence(&mu, n, 0.0).unwrap();
        let lazy = power_sequence(&lazify(&mu), n, 0.0).unwrap();
        let mut expect = 0.0;
        let mut binom = 1.0f64;
        for j in 0..=n {
            expect += binom * plain.rows[j].a;
            binom *= (n - j) as f64 / (j + 1) as f64;
        }
        expect *= 0.5f64.powi(n as i32);
        prop_assert!((lazy.rows[n].a - expect).abs() < 1e-13);
    }
}
