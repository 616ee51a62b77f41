//! Paired data augmentation: random axis flips and thin plate spline warps,
//! always applied identically to both scans of a pair.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{flip, Volume3D};

/// Draws the flip decision: `None` with probability 1/2, otherwise a
/// uniformly chosen axis.
pub fn draw_flip<R: Rng + ?Sized>(rng: &mut R) -> Option<usize> {
    if rng.random::<f64>() < 0.5 {
        Some(rng.random_range(0..3))
    } else {
        None
    }
}

pub fn apply_flip_pair(a: &Volume3D, b: &Volume3D, axis: Option<usize>) -> Result<(Volume3D, Volume3D)> {
    a.check_same_dims(b)?;
    Ok(match axis {
        Some(ax) => (flip(a, ax), flip(b, ax)),
        None => (a.clone(), b.clone()),
    })
}

/// Flips both volumes along the same random axis with probability 1/2.
/// Returns the decision alongside the outputs so it can be replayed.
pub fn random_flip_pair<R: Rng + ?Sized>(
    a: &Volume3D,
    b: &Volume3D,
    rng: &mut R,
) -> Result<(Volume3D, Volume3D, Option<usize>)> {
    a.check_same_dims(b)?;
    let axis = draw_flip(rng);
    let (fa, fb) = apply_flip_pair(a, b, axis)?;
    Ok((fa, fb, axis))
}

/// 3D thin plate spline with kernel `U(r) = r`.
///
/// The displacement at `p` is `sum_i w_i |p - c_i| + a_0 + A p`. With fewer
/// than four affinely independent control points the polynomial part is
/// reduced to a constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsWarp {
    control_points: Vec<[f64; 3]>,
    displacements: Vec<[f64; 3]>,
    #[serde(default)]
    solution: Option<TpsSolution>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TpsSolution {
    /// One row per control point, one column per displacement component.
    kernel_weights: Vec<[f64; 3]>,
    /// Rows: constant, then x, y, z coefficients when affine.
    poly: Vec<[f64; 3]>,
}

impl TpsWarp {
    pub fn new(control_points: Vec<[f64; 3]>, displacements: Vec<[f64; 3]>) -> Result<Self> {
        if control_points.len() != displacements.len() {
            return Err(Error::Shape(format!(
                "{} control points but {} displacements",
                control_points.len(),
                displacements.len()
            )));
        }
        if control_points.is_empty() {
            return Err(Error::Config("TPS warp needs at least one control point".into()));
        }
        let finite = |v: &[f64; 3]| v.iter().all(|x| x.is_finite());
        if !control_points.iter().all(finite) || !displacements.iter().all(finite) {
            return Err(Error::Numerical("non-finite TPS control data".into()));
        }
        Ok(Self {
            control_points,
            displacements,
            solution: None,
        })
    }

    /// Random warp: `n_points` control points uniform over the inner 80% of
    /// the volume's physical extent, displacements isotropic Gaussian with
    /// standard deviation `sd_mm`. Returned already solved.
    pub fn random<R: Rng + ?Sized>(vol: &Volume3D, n_points: usize, sd_mm: f64, rng: &mut R) -> Result<Self> {
        let [nx, ny, nz] = vol.dims();
        let [sx, sy, sz] = vol.spacing();
        let half = [
            0.4 * (nx as f64 - 1.0) * sx,
            0.4 * (ny as f64 - 1.0) * sy,
            0.4 * (nz as f64 - 1.0) * sz,
        ];
        let normal = Normal::new(0.0, sd_mm.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut pts = Vec::with_capacity(n_points);
        let mut disp = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            pts.push([
                rng.random_range(-1.0..=1.0) * half[0],
                rng.random_range(-1.0..=1.0) * half[1],
                rng.random_range(-1.0..=1.0) * half[2],
            ]);
            disp.push([normal.sample(rng), normal.sample(rng), normal.sample(rng)]);
        }
        let mut w = Self::new(pts, disp)?;
        w.solve()?;
        Ok(w)
    }

    pub fn control_points(&self) -> &[[f64; 3]] {
        &self.control_points
    }

    pub fn displacements(&self) -> &[[f64; 3]] {
        &self.displacements
    }

    pub fn is_solved(&self) -> bool {
        self.solution.is_some()
    }

    fn affine_basis_ok(&self) -> bool {
        let n = self.control_points.len();
        if n < 4 {
            return false;
        }
        let p = DMatrix::from_fn(n, 4, |i, j| if j == 0 { 1.0 } else { self.control_points[i][j - 1] });
        let sv = p.singular_values();
        let max = sv.max();
        sv.min() > 1e-9 * max.max(1.0)
    }

    pub fn solve(&mut self) -> Result<()> {
        let n = self.control_points.len();
        let m = if self.affine_basis_ok() { 4 } else { 1 };
        let size = n + m;
        let mut l = DMatrix::<f64>::zeros(size, size);
        for i in 0..n {
            for j in 0..n {
                l[(i, j)] = kernel(&self.control_points[i], &self.control_points[j]);
            }
            l[(i, n)] = 1.0;
            l[(n, i)] = 1.0;
            if m == 4 {
                for a in 0..3 {
                    l[(i, n + 1 + a)] = self.control_points[i][a];
                    l[(n + 1 + a, i)] = self.control_points[i][a];
                }
            }
        }
        let lu = l.lu();
        let mut weights = vec![[0.0; 3]; n];
        let mut poly = vec![[0.0; 3]; m];
        for comp in 0..3 {
            let mut rhs = DVector::<f64>::zeros(size);
            for i in 0..n {
                rhs[i] = self.displacements[i][comp];
            }
            let sol = lu
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("TPS system is singular (duplicate control points?)".into()))?;
            for i in 0..n {
                weights[i][comp] = sol[i];
            }
            for r in 0..m {
                poly[r][comp] = sol[n + r];
            }
        }
        self.solution = Some(TpsSolution {
            kernel_weights: weights,
            poly,
        });
        Ok(())
    }

    /// Displacement (mm) at a physical point.
    pub fn displacement(&self, p: &[f64; 3]) -> Result<[f64; 3]> {
        let sol = self.solution.as_ref().ok_or(Error::Unsolved)?;
        Ok(self.eval(sol, p))
    }

    fn eval(&self, sol: &TpsSolution, p: &[f64; 3]) -> [f64; 3] {
        let mut u = sol.poly[0];
        if sol.poly.len() == 4 {
            for a in 0..3 {
                for (c, ui) in u.iter_mut().enumerate() {
                    *ui += sol.poly[1 + a][c] * p[a];
                }
            }
        }
        for (cp, w) in self.control_points.iter().zip(&sol.kernel_weights) {
            let r = kernel(p, cp);
            for c in 0..3 {
                u[c] += w[c] * r;
            }
        }
        u
    }

    /// Dense displacement field on the grid of `vol`, one vector per voxel.
    pub fn dense_field(&self, vol: &Volume3D) -> Result<Vec<[f64; 3]>> {
        let sol = self.solution.as_ref().ok_or(Error::Unsolved)?;
        let [nx, ny, nz] = vol.dims();
        let mut field = Vec::with_capacity(vol.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let p = vol.voxel_to_physical(i as f64, j as f64, k as f64);
                    field.push(self.eval(sol, &[p.x, p.y, p.z]));
                }
            }
        }
        Ok(field)
    }
}

#[inline]
fn kernel(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn warp_with_field(vol: &Volume3D, field: &[[f64; 3]]) -> Volume3D {
    let [nx, ny, nz] = vol.dims();
    let mut out = Vec::with_capacity(vol.len());
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = vol.voxel_to_physical(i as f64, j as f64, k as f64);
                let u = field[idx];
                out.push(vol.sample_physical(&Vector3::new(p.x + u[0], p.y + u[1], p.z + u[2])));
                idx += 1;
            }
        }
    }
    vol.with_data(out)
}

/// Resamples both volumes through the same TPS displacement field:
/// `out(p) = in(p + u(p))`, trilinear, zero outside.
pub fn tps_warp_pair(a: &Volume3D, b: &Volume3D, warp: &TpsWarp) -> Result<(Volume3D, Volume3D)> {
    a.check_same_dims(b)?;
    let field = warp.dense_field(a)?;
    Ok((warp_with_field(a, &field), warp_with_field(b, &field)))
}
