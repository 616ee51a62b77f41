use deepatrophy_core::synth::{make_phantom, simulate_timepoint, ConfoundDraw, ConfoundLevels, PhantomConfig};
use deepatrophy_stats::baseline::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn smooth_phantom() -> PhantomConfig {
    PhantomConfig {
        texture_amplitude: 0.0,
        ..Default::default()
    }
}

#[test]
fn noiseless_two_percent_per_year() {
    let cfg = smooth_phantom();
    let seg = SegmentConfig::from_levels(cfg.background_level, cfg.structure_intensity);
    let clean = ConfoundDraw::draw(&ConfoundLevels::none(), &mut ChaCha8Rng::seed_from_u64(0));
    for seed in 0..5 {
        let (ph, ..) = make_phantom(seed, &cfg).unwrap();
        let (a, _) = simulate_timepoint(&ph, 0.02, 0.0, &clean, false);
        let (b, _) = simulate_timepoint(&ph, 0.02, 365.25, &clean, false);
        let c = baseline_volume_change(&a, &b, 365.25, &seg).unwrap();
        assert!((c + 2.0).abs() < 0.2, "seed {seed}: {c}");
        // reversed order flips the sign of the interval, not of the loss
        let r = baseline_volume_change(&b, &a, -365.25, &seg).unwrap();
        assert!(r < 0.0);
    }
}

#[test]
fn identical_scans_and_bad_input() {
    let (_, img, _) = make_phantom(1, &smooth_phantom()).unwrap();
    let seg = SegmentConfig::default();
    assert_eq!(baseline_volume_change(&img, &img, 200.0, &seg).unwrap(), 0.0);
    assert!(baseline_volume_change(&img, &img, 0.0, &seg).is_err());
    assert!(segment_volume(&img, &SegmentConfig { lo: 0.5, hi: 0.5 }).is_err());
    let other = deepatrophy_core::Volume3D::zeros([16, 16, 16], [1.0; 3]).unwrap();
    assert!(baseline_volume_change(&img, &other, 100.0, &seg).is_err());
}

#[test]
fn segmented_volume_tracks_the_ellipsoid() {
    let cfg = smooth_phantom();
    let seg = SegmentConfig::from_levels(cfg.background_level, cfg.structure_intensity);
    for seed in 0..5 {
        let (ph, img, _) = make_phantom(seed, &cfg).unwrap();
        let v = segment_volume(&img, &seg).unwrap();
        assert!(
            (v / ph.analytic_volume() - 1.0).abs() < 0.03,
            "{v} vs {}",
            ph.analytic_volume()
        );
    }
}

#[test]
fn jitter_alone_is_unbiased() {
    // no atrophy: jitter-only changes should scatter around zero
    let cfg = smooth_phantom();
    let seg = SegmentConfig::from_levels(cfg.background_level, cfg.structure_intensity);
    let levels = ConfoundLevels {
        noise_sd: 0.0,
        bias_amplitude: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (ph, ..) = make_phantom(3, &cfg).unwrap();
    let changes: Vec<f64> = (0..30)
        .map(|_| {
            let (a, _) = simulate_timepoint(&ph, 0.0, 0.0, &ConfoundDraw::draw(&levels, &mut rng), false);
            let (b, _) = simulate_timepoint(&ph, 0.0, 365.25, &ConfoundDraw::draw(&levels, &mut rng), false);
            baseline_volume_change(&a, &b, 365.25, &seg).unwrap()
        })
        .collect();
    let n = changes.len() as f64;
    let mean = changes.iter().sum::<f64>() / n;
    let sd = (changes.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt() + 0.05, "mean {mean}, sd {sd}");
}
