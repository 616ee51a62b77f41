use deepatrophy_stats::hypothesis::binomial_chance_test;
use deepatrophy_stats::metrics::roc_auc;
use deepatrophy_stats::progression::{pairr, summary_slope};
use deepatrophy_stats::samplesize::{sample_size_raw, CohortStats, TrialDesign};
use proptest::prelude::*;

proptest! {
    #[test]
    fn auc_complements_under_negation(scores in prop::collection::vec(-10i32..10, 6..60), flips in prop::collection::vec(any::<bool>(), 60)) {
        let mut labels: Vec<bool> = flips[..scores.len()].to_vec();
        labels[0] = true;
        labels[1] = false;
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let a = roc_auc(&s, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + roc_auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_to_monotone_maps(scores in prop::collection::vec(-5.0f64..5.0, 6..40)) {
        let labels: Vec<bool> = (0..scores.len()).map(|i| i % 2 == 0).collect();
        let mapped: Vec<f64> = scores.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&mapped, &labels).unwrap());
    }

    #[test]
    fn pairr_scales(pii in -2000.0f64..2000.0, dt in 1.0f64..2000.0, a in 0.1f64..10.0) {
        let r = pairr(pii, dt).unwrap();
        prop_assert!((pairr(a * pii, a * dt).unwrap() - r).abs() <= 1e-9 * r.abs().max(1.0));
    }

    #[test]
    fn slope_is_linear_in_values(t in prop::collection::vec(1.0f64..1500.0, 1..6), k in -0.1f64..0.1, b in -10.0f64..10.0) {
        let pts: Vec<(f64, f64)> = t.iter().map(|&t| (t, b + k * t)).collect();
        let s = summary_slope(&pts, b).unwrap();
        prop_assert!((s - k * 365.25).abs() < 1e-9);
    }

    #[test]
    fn sample_size_scales_with_variance(sd in 0.01f64..10.0, diff in 0.01f64..5.0, c in 0.1f64..10.0) {
        let d = TrialDesign::default();
        let base = CohortStats { mean_pat: diff, mean_ctl: 0.0, sd_pat: sd, n_pat: 5, n_ctl: 5 };
        let scaled = CohortStats { sd_pat: c * sd, mean_pat: c * diff, ..base.clone() };
        let a = sample_size_raw(&base, &d).unwrap();
        prop_assert!((sample_size_raw(&scaled, &d).unwrap() - a).abs() <= 1e-9 * a);
    }

    #[test]
    fn binomial_p_is_a_probability(n in 1u64..80, frac in 0.0f64..=1.0, p0 in 0.05f64..0.95) {
        let k = (frac * n as f64).round() as u64;
        let p = binomial_chance_test(k, n, p0).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
    }
}
