use mixlab_core::mix2::{
    analyze, drop_rate, evaluate_drop_profile, mean_queue_length, optimal_threshold,
    orient_and_rho, stationary_distribution, DropProfile, ThresholdPolicy, DEFAULT_Y_MAX,
};
use mixlab_core::{MixError, Probability, RatePair};
use proptest::prelude::*;

fn brute_force_argmin(rho: f64, max_m: u32) -> u32 {
    (0..=max_m)
        .min_by(|&a, &b| {
            mean_queue_length(a, rho)
                .unwrap()
                .total_cmp(&mean_queue_length(b, rho).unwrap())
        })
        .unwrap()
}

#[test]
fn threshold_matches_brute_force_beyond_fifty() {
    for rho in [0.985, 0.99, 0.995] {
        assert_eq!(
            optimal_threshold(rho).unwrap(),
            brute_force_argmin(rho, 400)
        );
    }
}

#[test]
fn mean_queue_is_convex_in_m() {
    for rho in [0.3, 0.6, 0.8, 0.95] {
        let l: Vec<f64> = (0..60)
            .map(|m| mean_queue_length(m, rho).unwrap())
            .collect();
        for w in l.windows(3) {
            assert!(w[0] + w[2] - 2.0 * w[1] >= -1e-12);
        }
    }
}

#[test]
fn drop_identity_on_grid() {
    for i in 1..20 {
        for j in 1..20 {
            if i == j {
                continue;
            }
            let rates = RatePair::new(0.05 * i as f64, 0.05 * j as f64).unwrap();
            let o = orient_and_rho(&rates).unwrap();
            for m in [0, 1, 3, optimal_threshold(o.rho).unwrap(), 20] {
                let d = drop_rate(m, &o).unwrap();
                assert!((d.rate - d.via_stationary).abs() < 1e-12, "{rates:?} m={m}");
            }
        }
    }
}

#[test]
fn equal_rates_are_singular() {
    let err = analyze(&RatePair::new(0.4, 0.4).unwrap()).unwrap_err();
    assert!(matches!(err, MixError::SingularRates) && err.is_regime());
}

#[test]
fn analysis_is_label_symmetric() {
    let a = analyze(&RatePair::new(0.5, 0.45).unwrap()).unwrap();
    let b = analyze(&RatePair::new(0.45, 0.5).unwrap()).unwrap();
    assert_eq!(a.m_star, b.m_star);
    assert_eq!(a.mean_queue, b.mean_queue);
    assert!(b.oriented.swapped && !a.oriented.swapped);
}

#[test]
fn threshold_profiles_match_closed_form() {
    for rho in [0.2, 0.6, 0.8, 0.9] {
        for m in 0..8 {
            let exact = stationary_distribution(m, rho, DEFAULT_Y_MAX).unwrap();
            let numeric =
                evaluate_drop_profile(&ThresholdPolicy { m }.to_profile(), rho, DEFAULT_Y_MAX)
                    .unwrap();
            assert!(exact.max_abs_diff(&numeric.pi) < 1e-8);
            assert!((numeric.mean_queue - mean_queue_length(m, rho).unwrap()).abs() < 1e-8);
        }
    }
}

fn profile_strategy() -> impl Strategy<Value = DropProfile> {
    prop::collection::vec(0.0..1.0f64, 0..12).prop_map(|v| {
        let mut delta: Vec<Probability> = v
            .into_iter()
            .map(|d| Probability::new(d).unwrap())
            .collect();
        delta.push(Probability::ONE);
        DropProfile::new(delta).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn no_profile_beats_the_threshold(profile in profile_strategy(), rho in 0.05..0.95f64) {
        let best = mean_queue_length(optimal_threshold(rho).unwrap(), rho).unwrap();
        let eval = evaluate_drop_profile(&profile, rho, DEFAULT_Y_MAX).unwrap();
        prop_assert!(eval.mean_queue >= best - 1e-8);
        prop_assert!((eval.pi.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stationary_mass_is_one(m in 0u32..30, rho in 0.0..0.97f64) {
        let pi = stationary_distribution(m, rho, DEFAULT_Y_MAX).unwrap();
        prop_assert!((pi.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_is_monotone(a in 0.0..0.99f64, b in 0.0..0.99f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(optimal_threshold(lo).unwrap() <= optimal_threshold(hi).unwrap());
    }
}
