//! Rigid resampling, normalized cross-correlation and a derivative-free
//! multi-resolution rigid registration, plus the two-way half-way
//! preprocessing of scan pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rigid::{halfway_factor, RigidTransform};
use crate::volume::Volume3D;

/// `out(p) = vol(T(p))` on the grid of `vol`; samples falling outside are 0.
pub fn resample_rigid(vol: &Volume3D, t: &RigidTransform) -> Volume3D {
    resample_rigid_onto(vol, t, vol.dims())
}

/// `out(p) = vol(T(p))` on a centred grid of `dims` voxels with the spacing
/// of `vol`; samples falling outside `vol` are 0.
pub fn resample_rigid_onto(vol: &Volume3D, t: &RigidTransform, dims: [usize; 3]) -> Volume3D {
    let target = Volume3D::zeros(dims, vol.spacing()).expect("dims come from a valid volume");
    let r = t.rotation_matrix();
    let tr = t.translation();
    let mut out = Vec::with_capacity(target.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = target.voxel_to_physical(i as f64, j as f64, k as f64);
                let q = r * p + tr;
                out.push(vol.sample_physical(&q));
            }
        }
    }
    target.with_data(out)
}

fn check_variance(label: &str, var: f64, scale: f64) -> Result<()> {
    if !(var > 1e-20 * scale.max(1e-300)) {
        return Err(Error::Degenerate(format!("{label} has zero intensity variance")));
    }
    Ok(())
}

/// Pearson correlation of the two intensity fields.
pub fn ncc(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    a.check_same_dims(b)?;
    let n = a.len() as f64;
    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        sa += x as f64;
        sb += y as f64;
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    check_variance("first volume", saa, ma * ma * n)?;
    check_variance("second volume", sbb, mb * mb * n)?;
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Affine map from fixed voxel indices to continuous moving voxel
/// coordinates for `p -> T(p)`: returns `(columns, offset)`.
fn voxel_map(fixed: &Volume3D, moving: &Volume3D, t: &RigidTransform) -> ([[f64; 3]; 3], [f64; 3]) {
    let r = t.rotation_matrix();
    let (fs, ms) = (fixed.spacing(), moving.spacing());
    let origin = moving.physical_to_voxel(&t.apply(&fixed.voxel_to_physical(0.0, 0.0, 0.0)));
    let mut cols = [[0.0; 3]; 3];
    for (c, col) in cols.iter_mut().enumerate() {
        for (row, v) in col.iter_mut().enumerate() {
            *v = r[(row, c)] * fs[c] / ms[row];
        }
    }
    (cols, origin)
}

/// Trilinear sample for a coordinate already known to lie inside
/// `[0, n-1]` on every axis.
#[inline(always)]
fn sample_inside(d: &[f32], dims: [usize; 3], x: f64, y: f64, z: f64) -> f64 {
    let [nx, ny, nz] = dims;
    let ix = (x as usize).min(nx.saturating_sub(2));
    let iy = (y as usize).min(ny.saturating_sub(2));
    let iz = (z as usize).min(nz.saturating_sub(2));
    let (tx, ty, tz) = (x - ix as f64, y - iy as f64, z - iz as f64);
    let sx = if nx > 1 { 1 } else { 0 };
    let sy = if ny > 1 { nx } else { 0 };
    let sz = if nz > 1 { nx * ny } else { 0 };
    let b = ix + nx * (iy + ny * iz);
    let v = |o: usize| d[b + o] as f64;
    let c00 = v(0) + (v(sx) - v(0)) * tx;
    let c10 = v(sy) + (v(sy + sx) - v(sy)) * tx;
    let c01 = v(sz) + (v(sz + sx) - v(sz)) * tx;
    let c11 = v(sz + sy) + (v(sz + sy + sx) - v(sz + sy)) * tx;
    let c0 = c00 + (c10 - c00) * ty;
    let c1 = c01 + (c11 - c01) * ty;
    c0 + (c1 - c0) * tz
}

/// NCC between `fixed` and `moving ∘ T`, restricted to fixed voxels whose
/// mapped position lands inside the moving grid. Only every `stride`-th
/// fixed voxel along each axis is visited.
fn ncc_under_transform(fixed: &Volume3D, moving: &Volume3D, t: &RigidTransform, stride: usize) -> f64 {
    let [nx, ny, nz] = fixed.dims();
    let md = moving.dims();
    let (cols, origin) = voxel_map(fixed, moving, t);
    let lim = [md[0] as f64 - 1.0, md[1] as f64 - 1.0, md[2] as f64 - 1.0];
    let (fd, mdata) = (fixed.data(), moving.data());
    let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0usize, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let s = stride.max(1);
    for k in (0..nz).step_by(s) {
        for j in (0..ny).step_by(s) {
            let (jf, kf) = (j as f64, k as f64);
            let row = [
                origin[0] + cols[1][0] * jf + cols[2][0] * kf,
                origin[1] + cols[1][1] * jf + cols[2][1] * kf,
                origin[2] + cols[1][2] * jf + cols[2][2] * kf,
            ];
            for i in (0..nx).step_by(s) {
                let f = i as f64;
                let x = row[0] + cols[0][0] * f;
                let y = row[1] + cols[0][1] * f;
                let z = row[2] + cols[0][2] * f;
                if !(x >= 0.0 && y >= 0.0 && z >= 0.0 && x <= lim[0] && y <= lim[1] && z <= lim[2]) {
                    continue;
                }
                let a = fd[i + nx * (j + ny * k)] as f64;
                let b = sample_inside(mdata, md, x, y, z);
                n += 1;
                sa += a;
                sb += b;
                saa += a * a;
                sbb += b * b;
                sab += a * b;
            }
        }
    }
    if n < 8 {
        return f64::NAN;
    }
    let nf = n as f64;
    let va = saa - sa * sa / nf;
    let vb = sbb - sb * sb / nf;
    let cov = sab - sa * sb / nf;
    if !(va > 0.0) || !(vb > 0.0) {
        return f64::NAN;
    }
    cov / (va * vb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Resolution levels; level 0 is full resolution, each further level halves it.
    pub levels: usize,
    pub sweeps_per_level: usize,
    pub translation_step_mm: f64,
    pub rotation_step_deg: f64,
    /// Step multiplier applied after each sweep.
    pub shrink: f64,
    pub golden_iterations: usize,
    /// Voxel stride of the NCC sum at full resolution; coarser levels use every voxel.
    pub fine_stride: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            sweeps_per_level: 4,
            translation_step_mm: 4.0,
            rotation_step_deg: 8.0,
            shrink: 0.5,
            golden_iterations: 10,
            fine_stride: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform,
    pub ncc: f64,
    pub ncc_at_identity: f64,
    pub evaluations: usize,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimisation of `f` on `[lo, hi]`; returns the best
/// abscissa seen.
fn golden_section(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
            if fc < best.1 {
                best = (c, fc);
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
            if fd < best.1 {
                best = (d, fd);
            }
        }
    }
    best
}

/// Finds `T` maximising NCC between `fixed` and `moving ∘ T`, so that
/// `resample_rigid(moving, T)` lines up with `fixed`.
pub fn register_rigid(fixed: &Volume3D, moving: &Volume3D, cfg: &RegistrationConfig) -> Result<Registration> {
    if cfg.levels == 0 || !(cfg.shrink > 0.0 && cfg.shrink < 1.0) {
        return Err(Error::Config(format!("invalid registration config {cfg:?}")));
    }
    let mut pyramid = vec![(fixed.clone(), moving.clone())];
    for _ in 1..cfg.levels {
        let (f, m) = pyramid.last().unwrap();
        if f.dims().iter().chain(m.dims().iter()).any(|&d| d < 8) {
            break;
        }
        let next = (f.downsample2(), m.downsample2());
        pyramid.push(next);
    }
    let mut evaluations = 0usize;
    let ncc_at_identity = ncc_under_transform(fixed, moving, &RigidTransform::identity(), 1);
    evaluations += 1;
    if !ncc_at_identity.is_finite() {
        return Err(Error::Numerical("NCC at identity is not finite".into()));
    }
    let mut x = [0.0f64; 6];
    for (level, (f, m)) in pyramid.iter().enumerate().rev() {
        let scale = (1u32 << level) as f64;
        let mut steps = [
            cfg.translation_step_mm * scale / (1u32 << (cfg.levels - 1)) as f64,
            0.0,
            0.0,
            cfg.rotation_step_deg.to_radians() * scale / (1u32 << (cfg.levels - 1)) as f64,
            0.0,
            0.0,
        ];
        steps[1] = steps[0];
        steps[2] = steps[0];
        steps[4] = steps[3];
        steps[5] = steps[3];
        let stride = if level == 0 { cfg.fine_stride } else { 1 };
        let mut objective = |p: &[f64; 6]| -> f64 {
            evaluations += 1;
            -ncc_under_transform(f, m, &RigidTransform::from_params(p), stride)
        };
        let mut current = objective(&x);
        if !current.is_finite() {
            return Err(Error::Numerical(format!(
                "NCC objective is not finite at level {level}"
            )));
        }
        for _ in 0..cfg.sweeps_per_level {
            for axis in 0..6 {
                let base = x;
                let s = steps[axis];
                let (off, val) = golden_section(
                    |d| {
                        let mut p = base;
                        p[axis] += d;
                        let v = objective(&p);
                        if v.is_finite() {
                            v
                        } else {
                            f64::INFINITY
                        }
                    },
                    -s,
                    s,
                    cfg.golden_iterations,
                );
                if val < current {
                    x[axis] += off;
                    current = val;
                }
            }
            for s in steps.iter_mut() {
                *s *= cfg.shrink;
            }
        }
    }
    let mut transform = RigidTransform::from_params(&x);
    let mut final_ncc = ncc_under_transform(fixed, moving, &transform, 1);
    evaluations += 1;
    if !final_ncc.is_finite() {
        return Err(Error::Numerical("NCC diverged during registration".into()));
    }
    if final_ncc < ncc_at_identity {
        transform = RigidTransform::identity();
        final_ncc = ncc_at_identity;
    }
    Ok(Registration {
        transform,
        ncc: final_ncc,
        ncc_at_identity,
        evaluations,
    })
}

/// Resampling maps taking each slot of a pair into the shared half-way space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfwayMaps {
    pub slot0: RigidTransform,
    pub slot1: RigidTransform,
}

impl HalfwayMaps {
    pub fn apply(&self, i0: &Volume3D, i1: &Volume3D) -> (Volume3D, Volume3D) {
        (resample_rigid(i0, &self.slot0), resample_rigid(i1, &self.slot1))
    }
}

/// Variant A registers with slot 0 fixed, variant B with slot 1 fixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetricMaps {
    pub variant_a: HalfwayMaps,
    pub variant_b: HalfwayMaps,
    pub ncc_a: f64,
    pub ncc_b: f64,
}

/// Registers both ways and splits each transform into two equal halves.
pub fn symmetric_pair_maps(i0: &Volume3D, i1: &Volume3D, cfg: &RegistrationConfig) -> Result<SymmetricMaps> {
    let ra = register_rigid(i0, i1, cfg)?;
    let ha = halfway_factor(&ra.transform)?;
    let rb = register_rigid(i1, i0, cfg)?;
    let hb = halfway_factor(&rb.transform)?;
    Ok(SymmetricMaps {
        variant_a: HalfwayMaps {
            slot0: ha.inverse(),
            slot1: ha,
        },
        variant_b: HalfwayMaps {
            slot0: hb,
            slot1: hb.inverse(),
        },
        ncc_a: ra.ncc,
        ncc_b: rb.ncc,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricPair {
    pub variant_a: (Volume3D, Volume3D),
    pub variant_b: (Volume3D, Volume3D),
    pub maps: SymmetricMaps,
}

/// Two-way half-way preprocessing: every output image is interpolated
/// exactly once, whichever order the scans arrive in.
pub fn symmetric_pair_preprocess(i0: &Volume3D, i1: &Volume3D, cfg: &RegistrationConfig) -> Result<SymmetricPair> {
    i0.check_same_dims(i1)?;
    let maps = symmetric_pair_maps(i0, i1, cfg)?;
    Ok(SymmetricPair {
        variant_a: maps.variant_a.apply(i0, i1),
        variant_b: maps.variant_b.apply(i0, i1),
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn blob(dims: [usize; 3]) -> Volume3D {
        let v = Volume3D::zeros(dims, [1.0; 3]).unwrap();
        Volume3D::from_fn(dims, [1.0; 3], |i, j, k| {
            let p = v.voxel_to_physical(i as f64, j as f64, k as f64);
            let e = (p.x - 1.0).powi(2) / 20.0 + (p.y + 0.5).powi(2) / 35.0 + p.z.powi(2) / 15.0;
            ((-e).exp() + 0.3 * (-((p.x + 4.0).powi(2) + (p.y - 5.0).powi(2) + (p.z - 2.0).powi(2)) / 6.0).exp()) as f32
        })
        .unwrap()
    }

    #[test]
    fn identity_resample() {
        let v = blob([10, 12, 8]);
        let r = resample_rigid(&v, &RigidTransform::identity());
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_shift_is_exact() {
        let v = blob([10, 12, 8]);
        let r = resample_rigid(&v, &RigidTransform::from_translation(Vector3::new(2.0, 0.0, -1.0)));
        for k in 0..8 {
            for j in 0..12 {
                for i in 0..10 {
                    let expect = if i + 2 < 10 && k >= 1 {
                        v.get(i + 2, j, k - 1)
                    } else {
                        0.0
                    };
                    assert_eq!(r.get(i, j, k), expect);
                }
            }
        }
    }

    #[test]
    fn ncc_basic_identities() {
        let v = blob([8, 9, 10]);
        assert!((ncc(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg = v.map(|x| -x).unwrap();
        assert!((ncc(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        let aff = v.map(|x| 3.0 * x + 7.0).unwrap();
        assert!((ncc(&v, &aff).unwrap() - 1.0).abs() < 1e-6);
        let flat = Volume3D::new(v.dims(), [1.0; 3], vec![2.0; v.len()]).unwrap();
        assert!(matches!(ncc(&v, &flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, fx) = golden_section(|x| (x - 0.3).powi(2), -1.0, 1.0, 40);
        assert!((x - 0.3).abs() < 1e-6 && fx < 1e-12);
    }

    #[test]
    fn self_registration_is_identity() {
        let v = blob([20, 22, 18]);
        let reg = register_rigid(&v, &v, &RegistrationConfig::default()).unwrap();
        let (ang, dist) = reg.transform.distance(&RigidTransform::identity());
        assert!(ang.to_degrees() < 0.1 && dist < 0.1, "{ang} {dist}");
        assert!(reg.ncc >= reg.ncc_at_identity);
    }
}
