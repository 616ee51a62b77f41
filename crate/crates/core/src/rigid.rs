//! Rigid transforms (SE(3)) with exponential/logarithm maps and the half-way
//! square root used for symmetric pair preprocessing.

use nalgebra::{Matrix3, Matrix4, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angles at or beyond `PI - LOG_ANGLE_MARGIN` have no unique logarithm.
pub const LOG_ANGLE_MARGIN: f64 = 1e-6;

/// `p -> R p + t`, with `R` a unit quaternion and `t` in mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

/// Tangent vector: rotation part `omega` (rad) and linear part `rho` (mm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub rho: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            omega: Vector3::zeros(),
            rho: Vector3::zeros(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            omega: self.omega * s,
            rho: self.rho * s,
        }
    }

    /// `[omega_x, omega_y, omega_z, rho_x, rho_y, rho_z]`
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.rho.x,
            self.rho.y,
            self.rho.z,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            omega: Vector3::new(a[0], a[1], a[2]),
            rho: Vector3::new(a[3], a[4], a[5]),
        }
    }

    /// 4x4 matrix of the Lie algebra element.
    pub fn hat(&self) -> Matrix4<f64> {
        let w = skew(&self.omega);
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.rho);
        m
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients `(a, b)` of `V = I + a W + b W^2` (left Jacobian of SO(3)).
fn jacobian_coeffs(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Coefficient `c` of `V^-1 = I - W/2 + c W^2`.
fn inv_jacobian_coeff(theta: f64) -> f64 {
    if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Rotation about `axis` by `angle` radians, no translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        Self::new(
            UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle),
            Vector3::zeros(),
        )
    }

    /// Registration parameterisation: translation in mm followed by a rotation
    /// vector in radians, `p -> exp([r]x) p + t`.
    pub fn from_params(p: &[f64; 6]) -> Self {
        Self::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(p[3], p[4], p[5])),
            Vector3::new(p[0], p[1], p[2]),
        )
    }

    pub fn to_params(&self) -> [f64; 6] {
        let r = self.rotation.scaled_axis();
        let t = self.translation;
        [t.x, t.y, t.z, r.x, r.y, r.z]
    }

    /// Builds from `[w, x, y, z]`; the quaternion is normalised and must be
    /// non-degenerate.
    pub fn from_quaternion_array(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = quat.norm();
        if !(n > 1e-12) || !n.is_finite() || t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("invalid rigid transform q={q:?} t={t:?}")));
        }
        Ok(Self::new(UnitQuaternion::from_quaternion(quat), Vector3::from(t)))
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rinv = self.rotation.inverse();
        RigidTransform {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Angle (rad) and translation distance (mm) between two transforms.
    pub fn distance(&self, other: &RigidTransform) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.angle(), (self.translation - other.translation).norm())
    }

    pub fn to_json(&self) -> TransformJson {
        let q = self.rotation.quaternion();
        TransformJson {
            quaternion: [q.w, q.i, q.j, q.k],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
    }

    pub fn from_json(j: &TransformJson) -> Result<Self> {
        Self::from_quaternion_array(j.quaternion, j.translation)
    }
}

/// On-disk transform: `{"quaternion":[w,x,y,z],"translation":[x,y,z]}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformJson {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

pub fn se3_exp(xi: &Twist) -> RigidTransform {
    let theta = xi.omega.norm();
    let rotation = UnitQuaternion::from_scaled_axis(xi.omega);
    let w = skew(&xi.omega);
    let (a, b) = jacobian_coeffs(theta);
    let v = Matrix3::identity() + w * a + w * w * b;
    RigidTransform {
        rotation,
        translation: v * xi.rho,
    }
}

pub fn se3_log(t: &RigidTransform) -> Result<Twist> {
    let q = t.rotation.quaternion();
    // Pick the hemisphere with w >= 0 so the angle lands in [0, pi].
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.vector())
    } else {
        (q.w, q.vector().into_owned())
    };
    let vn = v.norm();
    let theta = 2.0 * vn.atan2(w);
    if theta >= std::f64::consts::PI - LOG_ANGLE_MARGIN {
        return Err(Error::LogAmbiguity { angle: theta });
    }
    let omega = if vn < 1e-300 {
        Vector3::zeros()
    } else if theta < 1e-8 {
        // theta / sin(theta/2) -> 2 as theta -> 0
        v * (2.0 / w)
    } else {
        v * (theta / vn)
    };
    let wm = skew(&omega);
    let c = inv_jacobian_coeff(theta);
    let vinv = Matrix3::identity() - wm * 0.5 + wm * wm * c;
    Ok(Twist {
        omega,
        rho: vinv * t.translation,
    })
}

/// Group square root: `H ∘ H = T`.
pub fn halfway_factor(t: &RigidTransform) -> Result<RigidTransform> {
    Ok(se3_exp(&se3_log(t)?.scale(0.5)))
}
