mod common;

use common::{interior_rms, range};
use deepatrophy_core::registration::*;
use deepatrophy_core::ssim::{qc_gate, ssim, SsimConfig};
use deepatrophy_core::synth::*;
use deepatrophy_core::RigidTransform;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn still(jitter: [f64; 6]) -> ConfoundDraw {
    ConfoundDraw {
        jitter,
        bias_coeffs: [0.0; 9],
        noise_sd: 0.0,
        noise_seed: 0,
        corrupted: false,
    }
}

/// `moving(p) = fixed(J p)` on a padded canvas, so `J^-1` is the answer.
fn jittered_pair(
    seed: u64,
    jitter: [f64; 6],
) -> (deepatrophy_core::Volume3D, deepatrophy_core::Volume3D, RigidTransform) {
    let (ph, ..) = make_phantom(seed, &PhantomConfig::default()).unwrap();
    let (fixed, _) = simulate_timepoint(&ph, 0.0, 0.0, &still([0.0; 6]), false);
    let (moving, _) = simulate_timepoint(&ph, 0.0, 0.0, &still(jitter), false);
    (fixed, moving, RigidTransform::from_params(&jitter))
}

#[test]
fn self_registration_stays_at_identity() {
    let (fixed, ..) = jittered_pair(1, [0.0; 6]);
    let r = register_rigid(&fixed, &fixed, &RegistrationConfig::default()).unwrap();
    assert!(r.transform.angle().to_degrees() < 0.1 && r.transform.translation().norm() < 0.1);
    assert!(r.ncc >= r.ncc_at_identity);
}

#[test]
fn recovers_a_known_shift() {
    let (fixed, moving, j) = jittered_pair(2, [-2.0, 1.0, -3.0, 0.0, 0.0, 0.0]);
    let r = register_rigid(&fixed, &moving, &RegistrationConfig::default()).unwrap();
    let t = r.transform.translation();
    for (got, want) in t.iter().zip([2.0, -1.0, 3.0]) {
        assert!((got - want).abs() < 0.25, "{t:?}");
    }
    assert!(r.ncc >= r.ncc_at_identity);
    assert!(j.compose(&r.transform).translation().norm() < 0.43);
}

#[test]
fn recovers_a_known_rotation() {
    let (fixed, moving, j) = jittered_pair(3, [0.0, 0.0, 0.0, 0.0, 5f64.to_radians(), 0.0]);
    let r = register_rigid(&fixed, &moving, &RegistrationConfig::default()).unwrap();
    let (angle, _) = r.transform.distance(&j.inverse());
    assert!(angle.to_degrees() < 0.5, "{}", angle.to_degrees());
}

#[test]
fn recovers_random_jitter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let levels = ConfoundLevels {
        noise_sd: 0.0,
        bias_amplitude: 0.0,
        ..Default::default()
    };
    for seed in 0..6 {
        let draw = ConfoundDraw::draw(&levels, &mut rng);
        let (fixed, moving, j) = jittered_pair(10 + seed, draw.jitter);
        let r = register_rigid(&fixed, &moving, &RegistrationConfig::default()).unwrap();
        let err = j.compose(&r.transform);
        assert!(
            err.angle().to_degrees() < 0.5,
            "seed {seed}: {}",
            err.angle().to_degrees()
        );
        // residual displacement at the structure boundary
        let p = Vector3::new(8.0, 8.0, 8.0);
        assert!((err.apply(&p) - p).norm() < 0.3 * 3f64.sqrt(), "seed {seed}");
    }
}

#[test]
fn noise_free_offset_aligns() {
    let (fixed, moving, _) = jittered_pair(5, [1.2, -0.7, 0.4, 0.02, -0.03, 0.01]);
    let p = symmetric_pair_preprocess(&fixed, &moving, &RegistrationConfig::default()).unwrap();
    for (a, b) in [&p.variant_a, &p.variant_b] {
        let crop = |v: &deepatrophy_core::Volume3D| deepatrophy_core::volume::crop(v, [4, 4, 4], [24, 32, 24]).unwrap();
        assert!(ncc(&crop(a), &crop(b)).unwrap() >= 0.99);
    }
}

#[test]
fn swapping_inputs_swaps_roles() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = RegistrationConfig::default();
    for seed in 0..4 {
        let rate = rng.random_range(0.0..0.05);
        let (ph, ..) = make_phantom(seed, &PhantomConfig::default()).unwrap();
        let levels = ConfoundLevels::default();
        let (i0, _) = simulate_timepoint(&ph, rate, 0.0, &ConfoundDraw::draw(&levels, &mut rng), false);
        let (i1, _) = simulate_timepoint(&ph, rate, 730.0, &ConfoundDraw::draw(&levels, &mut rng), false);
        let fwd = symmetric_pair_preprocess(&i0, &i1, &cfg).unwrap();
        let rev = symmetric_pair_preprocess(&i1, &i0, &cfg).unwrap();
        let scale = range(&i0);
        for (x, y) in [
            (&fwd.variant_a.0, &rev.variant_b.1),
            (&fwd.variant_a.1, &rev.variant_b.0),
            (&fwd.variant_b.0, &rev.variant_a.1),
        ] {
            assert!(interior_rms(x, y, 4) / scale < 0.01);
        }
        // identical inputs give near-identical outputs
        let same = symmetric_pair_preprocess(&i0, &i0, &cfg).unwrap();
        assert!(interior_rms(&same.variant_a.0, &same.variant_a.1, 4) / scale < 0.01);
    }
}

#[test]
fn ssim_gate_separates_clean_from_corrupted() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = SsimConfig::default();
    let clean_levels = ConfoundLevels {
        jitter_translation_mm: 0.0,
        jitter_rotation_deg: 0.0,
        ..Default::default()
    };
    let mut scores = Vec::new();
    for seed in 0..20 {
        let (ph, ..) = make_phantom(100 + seed, &PhantomConfig::default()).unwrap();
        let (a, _) = simulate_timepoint(&ph, 0.02, 0.0, &ConfoundDraw::draw(&clean_levels, &mut rng), false);
        let (b, _) = simulate_timepoint(&ph, 0.02, 365.0, &ConfoundDraw::draw(&clean_levels, &mut rng), false);
        let mut noisy = ConfoundDraw::draw(&clean_levels, &mut rng);
        noisy.noise_sd = ConfoundLevels::default().corrupt_noise_sd;
        let (c, _) = simulate_timepoint(&ph, 0.02, 365.0, &noisy, false);
        let clean = ssim(&a, &b, &cfg).unwrap();
        let bad = ssim(&a, &c, &cfg).unwrap();
        assert!(clean > 0.9, "{clean}");
        assert!(bad < 0.6, "{bad}");
        assert_eq!(ssim(&a, &c, &cfg).unwrap(), ssim(&c, &a, &cfg).unwrap());
        assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        scores.push((format!("clean{seed}"), clean));
        scores.push((format!("noisy{seed}"), bad));
    }
    let report = qc_gate(scores, 0.6);
    assert_eq!(report.total(), 40);
    assert!(report.accepted.iter().all(|d| d.pair_id.starts_with("clean")));
    assert!(report.rejected.iter().all(|d| d.pair_id.starts_with("noisy")));
}
