//! Scalar 3D grids with physical spacing.
//!
//! Voxel `(i, j, k)` is stored at `i + nx * (j + ny * k)` (x fastest). Physical
//! coordinates are centred on the grid: voxel centre `(i, j, k)` sits at
//! `((i - (nx-1)/2) * sx, (j - (ny-1)/2) * sy, (k - (nz-1)/2) * sz)` mm, so
//! rigid transforms rotate about the middle of the volume.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume3D {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?} ({n} voxels)",
                data.len(),
                dims
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite intensity at voxel {pos}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    /// Same grid as `self`, new data. Used by the resamplers that only ever
    /// write finite values.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn check_same_dims(&self, other: &Volume3D) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "volume dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Physical position (mm) of a voxel centre.
    #[inline]
    pub fn voxel_to_physical(&self, i: f64, j: f64, k: f64) -> Vector3<f64> {
        Vector3::new(
            (i - (self.dims[0] as f64 - 1.0) * 0.5) * self.spacing[0],
            (j - (self.dims[1] as f64 - 1.0) * 0.5) * self.spacing[1],
            (k - (self.dims[2] as f64 - 1.0) * 0.5) * self.spacing[2],
        )
    }

    /// Continuous voxel coordinate of a physical position.
    #[inline]
    pub fn physical_to_voxel(&self, p: &Vector3<f64>) -> [f64; 3] {
        [
            p.x / self.spacing[0] + (self.dims[0] as f64 - 1.0) * 0.5,
            p.y / self.spacing[1] + (self.dims[1] as f64 - 1.0) * 0.5,
            p.z / self.spacing[2] + (self.dims[2] as f64 - 1.0) * 0.5,
        ]
    }

    /// Trilinear sample at a continuous voxel coordinate; positions outside
    /// the grid (beyond the outermost voxel centres) return 0.
    #[inline]
    pub fn sample_voxel(&self, x: f64, y: f64, z: f64) -> f32 {
        let [nx, ny, nz] = self.dims;
        let fx = x.floor();
        let fy = y.floor();
        let fz = z.floor();
        let (tx, ty, tz) = (x - fx, y - fy, z - fz);
        let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
        // Exact lattice hits (the common case for identity maps) need no
        // neighbour and must not be rejected at the last voxel.
        let last_x = nx as i64 - 1;
        let last_y = ny as i64 - 1;
        let last_z = nz as i64 - 1;
        if ix < 0 || iy < 0 || iz < 0 || ix > last_x || iy > last_y || iz > last_z {
            return 0.0;
        }
        if (ix == last_x && tx > 0.0) || (iy == last_y && ty > 0.0) || (iz == last_z && tz > 0.0) {
            return 0.0;
        }
        let ix1 = if tx > 0.0 { ix + 1 } else { ix } as usize;
        let iy1 = if ty > 0.0 { iy + 1 } else { iy } as usize;
        let iz1 = if tz > 0.0 { iz + 1 } else { iz } as usize;
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        let d = &self.data;
        let at = |i: usize, j: usize, k: usize| d[i + nx * (j + ny * k)] as f64;
        let c00 = at(ix, iy, iz) * (1.0 - tx) + at(ix1, iy, iz) * tx;
        let c10 = at(ix, iy1, iz) * (1.0 - tx) + at(ix1, iy1, iz) * tx;
        let c01 = at(ix, iy, iz1) * (1.0 - tx) + at(ix1, iy, iz1) * tx;
        let c11 = at(ix, iy1, iz1) * (1.0 - tx) + at(ix1, iy1, iz1) * tx;
        let c0 = c00 * (1.0 - ty) + c10 * ty;
        let c1 = c01 * (1.0 - ty) + c11 * ty;
        (c0 * (1.0 - tz) + c1 * tz) as f32
    }

    /// Trilinear sample at a physical position (mm).
    #[inline]
    pub fn sample_physical(&self, p: &Vector3<f64>) -> f32 {
        let [x, y, z] = self.physical_to_voxel(p);
        self.sample_voxel(x, y, z)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let ss: f64 = self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum();
        (ss / self.data.len() as f64).sqrt()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Elementwise map; the closure must return finite values.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Volume3D> {
        Volume3D::new(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    /// 2x block average along every axis (odd trailing voxels are dropped).
    /// Spacing doubles; used for the coarse registration level.
    pub fn downsample2(&self) -> Volume3D {
        let [nx, ny, nz] = self.dims;
        let dims = [(nx / 2).max(1), (ny / 2).max(1), (nz / 2).max(1)];
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let mut acc = 0.0f64;
                    let mut cnt = 0usize;
                    for dk in 0..2 {
                        for dj in 0..2 {
                            for di in 0..2 {
                                let (a, b, c) = (2 * i + di, 2 * j + dj, 2 * k + dk);
                                if a < nx && b < ny && c < nz {
                                    acc += self.get(a, b, c) as f64;
                                    cnt += 1;
                                }
                            }
                        }
                    }
                    data.push((acc / cnt as f64) as f32);
                }
            }
        }
        let spacing = [
            self.spacing[0] * nx as f64 / dims[0] as f64,
            self.spacing[1] * ny as f64 / dims[1] as f64,
            self.spacing[2] * nz as f64 / dims[2] as f64,
        ];
        Volume3D { dims, spacing, data }
    }
}

/// Standardises intensities to zero mean and unit population standard deviation.
pub fn normalize_intensity(vol: &Volume3D) -> Result<Volume3D> {
    if vol.len() < 2 {
        return Err(Error::Degenerate("normalization needs at least 2 voxels".into()));
    }
    let mean = vol.mean();
    let std = vol.std();
    if !(std > 0.0) || !std.is_finite() || std < 1e-12 * mean.abs().max(1.0) {
        return Err(Error::Degenerate(format!(
            "intensity standard deviation is {std}; cannot normalize"
        )));
    }
    let inv = 1.0 / std;
    Ok(vol.with_data(vol.data().iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect()))
}

/// Extracts the box `[origin, origin + size)` in voxel units.
pub fn crop(vol: &Volume3D, origin: [usize; 3], size: [usize; 3]) -> Result<Volume3D> {
    let dims = vol.dims();
    for a in 0..3 {
        if size[a] == 0 || origin[a] + size[a] > dims[a] {
            return Err(Error::Range(format!(
                "crop box origin {origin:?} size {size:?} exceeds volume dims {dims:?}"
            )));
        }
    }
    let mut data = Vec::with_capacity(size[0] * size[1] * size[2]);
    for c in 0..size[2] {
        for b in 0..size[1] {
            let start = vol.index(origin[0], origin[1] + b, origin[2] + c);
            data.extend_from_slice(&vol.data()[start..start + size[0]]);
        }
    }
    Ok(Volume3D {
        dims: size,
        spacing: vol.spacing(),
        data,
    })
}

/// Mirrors the volume along `axis` (0 = x, 1 = y, 2 = z).
pub fn flip(vol: &Volume3D, axis: usize) -> Volume3D {
    assert!(axis < 3, "flip axis must be 0, 1 or 2");
    let [nx, ny, nz] = vol.dims();
    let mut out = Vec::with_capacity(vol.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let (a, b, c) = match axis {
                    0 => (nx - 1 - i, j, k),
                    1 => (i, ny - 1 - j, k),
                    _ => (i, j, nz - 1 - k),
                };
                out.push(vol.get(a, b, c));
            }
        }
    }
    vol.with_data(out)
}

/// Origin of the centred box of `size` inside `dims`.
pub fn centered_origin(dims: Dims, size: [usize; 3]) -> Result<[usize; 3]> {
    let mut o = [0; 3];
    for a in 0..3 {
        if size[a] > dims[a] {
            return Err(Error::Range(format!("crop size {size:?} exceeds dims {dims:?}")));
        }
        o[a] = (dims[a] - size[a]) / 2;
    }
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims) -> Volume3D {
        Volume3D::from_fn(dims, [1.0; 3], |i, j, k| (i + 10 * j + 100 * k) as f32).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Volume3D::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume3D::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Volume3D::new([1, 1, 2], [1.0; 3], vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn two_point_standardization() {
        let v = Volume3D::new([2, 1, 1], [1.0; 3], vec![0.0, 2.0]).unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn zero_variance_is_an_error() {
        let v = Volume3D::new([2, 2, 1], [1.0; 3], vec![3.0; 4]).unwrap();
        assert!(matches!(normalize_intensity(&v), Err(Error::Degenerate(_))));
        let one = Volume3D::new([1, 1, 1], [1.0; 3], vec![3.0]).unwrap();
        assert!(normalize_intensity(&one).is_err());
    }

    #[test]
    fn normalization_is_idempotent() {
        let v = ramp([4, 5, 3]);
        let a = normalize_intensity(&v).unwrap();
        let b = normalize_intensity(&a).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn identity_crop() {
        let v = ramp([4, 3, 2]);
        assert_eq!(crop(&v, [0, 0, 0], v.dims()).unwrap(), v);
    }

    #[test]
    fn crop_paper_size() {
        let v = Volume3D::zeros([96, 96, 96], [1.0; 3]).unwrap();
        let c = crop(&v, [10, 5, 15], [48, 80, 64]).unwrap();
        assert_eq!(c.dims(), [48, 80, 64]);
    }

    #[test]
    fn crop_out_of_bounds() {
        let v = ramp([4, 4, 4]);
        assert!(matches!(crop(&v, [2, 0, 0], [3, 1, 1]), Err(Error::Range(_))));
        assert!(crop(&v, [0, 0, 0], [0, 1, 1]).is_err());
    }

    #[test]
    fn crop_matches_index_loop() {
        let v = ramp([4, 4, 4]);
        let c = crop(&v, [1, 1, 1], [2, 2, 2]).unwrap();
        let mut expect = Vec::new();
        for k in 1..3 {
            for j in 1..3 {
                for i in 1..3 {
                    expect.push(v.data()[i + 4 * j + 16 * k]);
                }
            }
        }
        assert_eq!(c.data(), expect.as_slice());
    }

    #[test]
    fn flip_is_an_involution() {
        let v = ramp([3, 4, 5]);
        for axis in 0..3 {
            let f = flip(&v, axis);
            assert_ne!(f, v);
            assert_eq!(flip(&f, axis), v);
        }
    }

    #[test]
    fn lattice_sampling_is_exact() {
        let v = ramp([4, 3, 2]);
        for k in 0..2 {
            for j in 0..3 {
                for i in 0..4 {
                    let p = v.voxel_to_physical(i as f64, j as f64, k as f64);
                    assert_eq!(v.sample_physical(&p), v.get(i, j, k));
                }
            }
        }
        assert_eq!(v.sample_voxel(-0.5, 0.0, 0.0), 0.0);
        assert_eq!(v.sample_voxel(3.2, 0.0, 0.0), 0.0);
        assert!((v.sample_voxel(0.5, 0.0, 0.0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn downsample_averages_blocks() {
        let v = Volume3D::from_fn([4, 4, 2], [1.0; 3], |i, _, _| i as f32).unwrap();
        let d = v.downsample2();
        assert_eq!(d.dims(), [2, 2, 1]);
        assert_eq!(d.spacing(), [2.0; 3]);
        assert_eq!(d.data(), &[0.5, 2.5, 0.5, 2.5]);
    }
}
