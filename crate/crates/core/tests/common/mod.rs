#![allow(dead_code)]

use deepatrophy_core::RigidTransform;
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Uniform random axis, angle uniform in `[0, max_angle)`, translation
/// uniform per axis in `[-max_t, max_t]`.
pub fn random_transform<R: Rng>(rng: &mut R, max_angle: f64, max_t: f64) -> RigidTransform {
    let axis = loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-6 {
            break v;
        }
    };
    let angle = rng.random_range(0.0..max_angle);
    let r = RigidTransform::from_axis_angle(axis, angle);
    let t = Vector3::new(
        rng.random_range(-max_t..=max_t),
        rng.random_range(-max_t..=max_t),
        rng.random_range(-max_t..=max_t),
    );
    RigidTransform::new(*r.rotation(), t)
}

/// Root-mean-square difference over voxels at least `margin` from every face.
pub fn interior_rms(a: &deepatrophy_core::Volume3D, b: &deepatrophy_core::Volume3D, margin: usize) -> f64 {
    let [nx, ny, nz] = a.dims();
    let (mut s, mut n) = (0.0, 0usize);
    for k in margin..nz - margin {
        for j in margin..ny - margin {
            for i in margin..nx - margin {
                let d = a.get(i, j, k) as f64 - b.get(i, j, k) as f64;
                s += d * d;
                n += 1;
            }
        }
    }
    (s / n as f64).sqrt()
}

pub fn range(v: &deepatrophy_core::Volume3D) -> f64 {
    let (lo, hi) = v.min_max();
    (hi - lo) as f64
}
