use fedrec_core::analysis::{
    empirical_breakdown_fraction, fit_power_law, predicted_breakdown_fraction, BreakdownQuery,
    PowerLawFit,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inverse-CDF draws from `p(x) ∝ x^(−β)` on `[1, ∞)`.
fn power_law_samples(beta: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            (1.0 - u).powf(-1.0 / (beta - 1.0))
        })
        .collect()
}

#[test]
fn recovers_known_exponent() {
    for seed in 0..3 {
        let xs = power_law_samples(2.5, 100_000, seed);
        let fit = fit_power_law(&xs).unwrap();
        assert!((fit.exponent - 2.5).abs() <= 0.05, "{}", fit.exponent);
        assert_eq!(fit.x_min, 1.0);
        assert!((fit.normalization - (fit.exponent - 1.0)).abs() < 1e-12);
    }
}

#[test]
fn prediction_agrees_with_counting() {
    let xs = power_law_samples(2.5, 100_000, 11);
    let fit = fit_power_law(&xs).unwrap();
    for n in [10, 100, 1000] {
        let q = BreakdownQuery::new(0.5, n).unwrap();
        let p = predicted_breakdown_fraction(&fit, &q);
        let e = empirical_breakdown_fraction(&xs, &q);
        assert!((p - e).abs() <= 0.05, "ñ={n}: predicted {p}, empirical {e}");
    }
}

proptest! {
    #[test]
    fn fractions_monotone(
        beta in 1.05f64..5.0,
        a1 in 0.01f64..0.5,
        a2 in 0.01f64..0.5,
        n1 in 0usize..5000,
        n2 in 0usize..5000,
        degrees in prop::collection::vec(0.0f64..1e4, 1..200),
    ) {
        let fit = PowerLawFit::new(beta, 1.0);
        let (lo_a, hi_a) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let (lo_n, hi_n) = if n1 <= n2 { (n1, n2) } else { (n2, n1) };
        let q = |a, n| BreakdownQuery::new(a, n).unwrap();
        prop_assert!(predicted_breakdown_fraction(&fit, &q(lo_a, lo_n)) <= predicted_breakdown_fraction(&fit, &q(lo_a, hi_n)));
        prop_assert!(predicted_breakdown_fraction(&fit, &q(hi_a, lo_n)) <= predicted_breakdown_fraction(&fit, &q(lo_a, lo_n)));
        prop_assert!(empirical_breakdown_fraction(&degrees, &q(lo_a, lo_n)) <= empirical_breakdown_fraction(&degrees, &q(lo_a, hi_n)));
        prop_assert!(empirical_breakdown_fraction(&degrees, &q(hi_a, lo_n)) <= empirical_breakdown_fraction(&degrees, &q(lo_a, lo_n)));
    }

    #[test]
    fn prediction_always_clamped(
        beta in 1.0001f64..100.0,
        c in 1e-6f64..1e6,
        a in 0.001f64..0.5,
        n in 0usize..1_000_000,
    ) {
        let fit = PowerLawFit { exponent: beta, normalization: c, x_min: 1.0 };
        let p = predicted_breakdown_fraction(&fit, &BreakdownQuery::new(a, n).unwrap());
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
