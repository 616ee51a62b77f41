mod common;

use std::f64::consts::PI;
use std::time::Instant;

use common::{interior_rms, random_transform, range};
use deepatrophy_core::registration::resample_rigid;
use deepatrophy_core::rigid::{halfway_factor, se3_exp, se3_log, Twist};
use deepatrophy_core::{Error, RigidTransform, Volume3D};
use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
fn expm(a: &Matrix4<f64>) -> Matrix4<f64> {
    let norm = a.abs().max();
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let b = a / 2f64.powi(s);
    let mut term = Matrix4::identity();
    let mut sum = Matrix4::identity();
    for k in 1..20 {
        term = term * b / k as f64;
        sum += term;
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum
}

fn max_abs(m: &Matrix4<f64>) -> f64 {
    m.abs().max()
}

#[test]
fn exp_matches_matrix_exponential() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..300 {
        let xi = Twist::from_array(std::array::from_fn(|i| {
            if i < 3 {
                rng.random_range(-1.5..1.5)
            } else {
                rng.random_range(-20.0..20.0)
            }
        }));
        let want = expm(&xi.hat());
        let got = se3_exp(&xi).to_matrix();
        assert!(max_abs(&(got - want)) < 1e-9, "{xi:?}");
    }
}

#[test]
fn log_exp_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let t = random_transform(&mut rng, 0.3, 5.0);
        let xi = se3_log(&t).unwrap();
        assert!(max_abs(&(expm(&xi.hat()) - t.to_matrix())) < 1e-8);
        assert!(max_abs(&(se3_exp(&xi).to_matrix() - t.to_matrix())) < 1e-8);
    }
    assert_eq!(se3_exp(&Twist::zero()), RigidTransform::identity());
    let pure = se3_log(&RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0))).unwrap();
    assert_eq!(pure.to_array(), [0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    let flip = RigidTransform::from_axis_angle(Vector3::x(), PI);
    assert!(matches!(se3_log(&flip), Err(Error::LogAmbiguity { .. })));
}

#[test]
fn halfway_squares_to_the_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let limit = 170f64.to_radians();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = random_transform(&mut rng, limit, 30.0);
        let h = halfway_factor(&t).unwrap();
        worst = worst.max(max_abs(&(h.to_matrix() * h.to_matrix() - t.to_matrix())));
        assert!((h.rotation().quaternion().norm() - 1.0).abs() < 1e-9);
    }
    assert!(worst < 1e-6, "{worst}");
    assert!(start.elapsed().as_secs_f64() < 5.0);
    let h = halfway_factor(&RigidTransform::from_translation(Vector3::new(0.0, 0.0, 2.0))).unwrap();
    assert!((h.translation() - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12 && h.angle() < 1e-12);
}

#[test]
fn inverse_composes_to_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let t = random_transform(&mut rng, PI, 50.0);
        for id in [t.compose(&t.inverse()), t.inverse().compose(&t)] {
            assert!(id.angle() < 1e-9 && id.translation().norm() < 1e-9);
        }
        let p = Vector3::new(rng.random_range(-9.0..9.0), 1.0, -2.0);
        assert!((t.inverse().apply(&t.apply(&p)) - p).norm() < 1e-9);
    }
}

#[test]
fn resample_there_and_back() {
    let img = Volume3D::from_fn([32, 40, 32], [1.0; 3], |i, j, k| {
        let d2 = (i as f32 - 15.5).powi(2) + ((j as f32 - 19.5) / 1.3).powi(2) + (k as f32 - 15.5).powi(2);
        (-d2 / (2.0 * 16.0)).exp()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let t = random_transform(&mut rng, 6f64.to_radians(), 1.5);
        let back = resample_rigid(&resample_rigid(&img, &t), &t.inverse());
        let rel = interior_rms(&img, &back, 6) / range(&img);
        assert!(rel < 0.02, "{rel}");
    }
}
