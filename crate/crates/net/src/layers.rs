//! Batched layer kernels with explicit backward passes. Spatial dims are
//! `[nx, ny, nz]` with x fastest, matching `Volume3D`.

use rayon::prelude::*;

use crate::real::{gemm, Mat, Real};

/// `[n, c, nz, ny, nx]` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, dims: [usize; 3]) -> Self {
        Self {
            n,
            c,
            dims,
            data: vec![T::zero(); n * c * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(n: usize, c: usize, dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * dims.iter().product::<usize>(), "tensor data length");
        Self { n, c, dims, data }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.voxels()
    }

    pub fn sample(&self, s: usize) -> &[T] {
        let l = self.sample_len();
        &self.data[s * l..(s + 1) * l]
    }
}

/// Geometry of a cubic-kernel convolution with padding `k / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, in_dims: [usize; 3]) -> Self {
        let pad = k / 2;
        let out_dims = in_dims.map(|d| (d + 2 * pad - k) / stride + 1);
        Self {
            cin,
            cout,
            k,
            stride,
            in_dims,
            out_dims,
        }
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.patch_len()
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Range of output indices along one axis whose input index
    /// `o * stride + kk - pad` lies in `[0, n)`.
    fn valid(&self, kk: usize, n: usize, n_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as i64, self.pad() as i64);
        let off = kk as i64 - p;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((n as i64 - 1 - off).div_euclid(s) + 1).clamp(0, n_out as i64);
        (lo.min(n_out as i64) as usize, hi.max(lo) as usize)
    }

    /// Unfolds one sample into a `patch_len x out_voxels` row-major matrix.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let [nx, ny, nz] = self.in_dims;
        let [ox, oy, oz] = self.out_dims;
        let (k, s, p) = (self.k, self.stride, self.pad() as i64);
        let pv = ox * oy * oz;
        col.fill(T::zero());
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * nx * ny * nz..(ci + 1) * nx * ny * nz];
            for kz in 0..k {
                let (z0, z1) = self.valid(kz, nz, oz);
                for ky in 0..k {
                    let (y0, y1) = self.valid(ky, ny, oy);
                    for kx in 0..k {
                        let (x0, x1) = self.valid(kx, nx, ox);
                        let dst = &mut col[row * pv..(row + 1) * pv];
                        for z in z0..z1 {
                            let iz = (z * s) as i64 + kz as i64 - p;
                            for y in y0..y1 {
                                let iy = (y * s) as i64 + ky as i64 - p;
                                let src = (iz as usize * ny + iy as usize) * nx;
                                let d = (z * oy + y) * ox;
                                let ix0 = (x0 * s) as i64 + kx as i64 - p;
                                if s == 1 {
                                    let a = src + ix0 as usize;
                                    dst[d + x0..d + x1].copy_from_slice(&xc[a..a + (x1 - x0)]);
                                } else {
                                    for (n, xo) in (x0..x1).enumerate() {
                                        dst[d + xo] = xc[src + (ix0 as usize) + n * s];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: accumulates columns back into a sample.
    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let [nx, ny, nz] = self.in_dims;
        let [ox, oy, oz] = self.out_dims;
        let (k, s, p) = (self.k, self.stride, self.pad() as i64);
        let pv = ox * oy * oz;
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &mut x[ci * nx * ny * nz..(ci + 1) * nx * ny * nz];
            for kz in 0..k {
                let (z0, z1) = self.valid(kz, nz, oz);
                for ky in 0..k {
                    let (y0, y1) = self.valid(ky, ny, oy);
                    for kx in 0..k {
                        let (x0, x1) = self.valid(kx, nx, ox);
                        let src = &col[row * pv..(row + 1) * pv];
                        for z in z0..z1 {
                            let iz = (z * s) as i64 + kz as i64 - p;
                            for y in y0..y1 {
                                let iy = (y * s) as i64 + ky as i64 - p;
                                let dst = (iz as usize * ny + iy as usize) * nx;
                                let d = (z * oy + y) * ox;
                                let ix0 = ((x0 * s) as i64 + kx as i64 - p) as usize;
                                for (n, xo) in (x0..x1).enumerate() {
                                    let v = &mut xc[dst + ix0 + n * s];
                                    *v = *v + src[d + xo];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Real>(x: &Tensor<T>, w: &[T], g: &ConvGeom) -> Tensor<T> {
    assert_eq!((x.c, x.dims), (g.cin, g.in_dims), "conv input shape");
    let pv = g.out_voxels();
    let samples: Vec<Vec<T>> = (0..x.n)
        .into_par_iter()
        .map(|s| {
            let mut out = vec![T::zero(); g.cout * pv];
            if g.k == 1 && g.stride == 1 {
                gemm(
                    Mat::new(w, g.cout, g.cin),
                    Mat::new(x.sample(s), g.cin, pv),
                    T::zero(),
                    &mut out,
                );
            } else {
                let mut col = vec![T::zero(); g.patch_len() * pv];
                g.im2col(x.sample(s), &mut col);
                gemm(
                    Mat::new(w, g.cout, g.patch_len()),
                    Mat::new(&col, g.patch_len(), pv),
                    T::zero(),
                    &mut out,
                );
            }
            out
        })
        .collect();
    Tensor::from_vec(x.n, g.cout, g.out_dims, samples.concat())
}

/// Returns `(dx, dw)`; `dx` is skipped when the input needs no gradient.
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Tensor<T>>, Vec<T>) {
    let pv = g.out_voxels();
    let kl = g.patch_len();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..x.n)
        .into_par_iter()
        .map(|s| {
            let dys = dy.sample(s);
            let mut col = vec![T::zero(); kl * pv];
            g.im2col(x.sample(s), &mut col);
            let mut dw = vec![T::zero(); g.weight_len()];
            gemm(Mat::new(dys, g.cout, pv), Mat::t(&col, kl, pv), T::zero(), &mut dw);
            let mut dx = Vec::new();
            if need_dx {
                gemm(Mat::t(w, g.cout, kl), Mat::new(dys, g.cout, pv), T::zero(), &mut col);
                dx = vec![T::zero(); x.sample_len()];
                g.col2im(&col, &mut dx);
            }
            (dw, dx)
        })
        .collect();
    let mut dw = vec![T::zero(); g.weight_len()];
    let mut dx = Vec::with_capacity(if need_dx { x.data.len() } else { 0 });
    for (pw, px) in parts {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        dx.extend(px);
    }
    let dx = need_dx.then(|| Tensor::from_vec(x.n, x.c, x.dims, dx));
    (dx, dw)
}

pub const BN_EPS: f64 = 1e-5;

pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub invstd: Vec<T>,
}

/// Per-channel mean and biased variance over batch and space.
fn channel_stats<T: Real>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let v = x.voxels();
    let m = (x.n * v) as f64;
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    for c in 0..x.c {
        let mut s = 0.0;
        for n in 0..x.n {
            let o = (n * x.c + c) * v;
            s += x.data[o..o + v].iter().map(|t| t.f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0;
        for n in 0..x.n {
            let o = (n * x.c + c) * v;
            q += x.data[o..o + v].iter().map(|t| (t.f64() - mu).powi(2)).sum::<f64>();
        }
        mean[c] = mu;
        var[c] = q / m;
    }
    (mean, var)
}

fn bn_apply<T: Real>(x: &Tensor<T>, mean: &[f64], var: &[f64], gamma: &[T], beta: &[T]) -> (Tensor<T>, BnCache<T>) {
    let v = x.voxels();
    let invstd: Vec<T> = var.iter().map(|&s| T::of(1.0 / (s + BN_EPS).sqrt())).collect();
    let mut y = x.clone();
    let mut xhat = vec![T::zero(); x.data.len()];
    for n in 0..x.n {
        for c in 0..x.c {
            let o = (n * x.c + c) * v;
            let (mu, is) = (T::of(mean[c]), invstd[c]);
            for i in o..o + v {
                let h = (x.data[i] - mu) * is;
                xhat[i] = h;
                y.data[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, BnCache { xhat, invstd })
}

/// Training-mode normalisation. Also returns the batch mean and unbiased
/// variance for the running estimates.
pub fn bn_forward_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, BnCache<T>, (Vec<f64>, Vec<f64>)) {
    let (mean, var) = channel_stats(x);
    let (y, cache) = bn_apply(x, &mean, &var, gamma, beta);
    let m = (x.n * x.voxels()) as f64;
    let unbiased = var
        .iter()
        .map(|&s| if m > 1.0 { s * m / (m - 1.0) } else { s })
        .collect();
    (y, cache, (mean, unbiased))
}

pub fn bn_forward_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    rmean: &[T],
    rvar: &[T],
) -> (Tensor<T>, BnCache<T>) {
    let mean: Vec<f64> = rmean.iter().map(|t| t.f64()).collect();
    let var: Vec<f64> = rvar.iter().map(|t| t.f64()).collect();
    bn_apply(x, &mean, &var, gamma, beta)
}

/// Gradient of training-mode batch normalisation: `(dx, dgamma, dbeta)`.
pub fn bn_backward<T: Real>(dy: &Tensor<T>, cache: &BnCache<T>, gamma: &[T]) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let v = dy.voxels();
    let m = (dy.n * v) as f64;
    let mut dgamma = vec![T::zero(); dy.c];
    let mut dbeta = vec![T::zero(); dy.c];
    let mut dx = dy.clone();
    for c in 0..dy.c {
        let (mut sg, mut sb) = (0.0, 0.0);
        for n in 0..dy.n {
            let o = (n * dy.c + c) * v;
            for i in o..o + v {
                sb += dy.data[i].f64();
                sg += (dy.data[i] * cache.xhat[i]).f64();
            }
        }
        dgamma[c] = T::of(sg);
        dbeta[c] = T::of(sb);
        let g = gamma[c].f64();
        let k = g * cache.invstd[c].f64() / m;
        for n in 0..dy.n {
            let o = (n * dy.c + c) * v;
            for i in o..o + v {
                let d = m * dy.data[i].f64() - sb - cache.xhat[i].f64() * sg;
                dx.data[i] = T::of(k * d);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the ReLU output `y` was not positive.
pub fn relu_backward_inplace<T: Real>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    for (d, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Global average pool to `[n, c]`.
pub fn gap_forward<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let v = x.voxels();
    let inv = 1.0 / v as f64;
    (0..x.n * x.c)
        .map(|i| T::of(x.data[i * v..(i + 1) * v].iter().map(|t| t.f64()).sum::<f64>() * inv))
        .collect()
}

pub fn gap_backward<T: Real>(dp: &[T], n: usize, c: usize, dims: [usize; 3]) -> Tensor<T> {
    let v: usize = dims.iter().product();
    let inv = T::of(1.0 / v as f64);
    let mut data = Vec::with_capacity(n * c * v);
    for &d in dp {
        data.extend(std::iter::repeat_n(d * inv, v));
    }
    Tensor::from_vec(n, c, dims, data)
}

/// `y[n, o] = W[o, :] . x[n, :] + b[o]`.
pub fn fc_forward<T: Real>(x: &[T], n: usize, w: &[T], b: &[T], n_in: usize, n_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * n_out);
    for s in 0..n {
        for o in 0..n_out {
            let mut acc = b[o];
            for i in 0..n_in {
                acc = acc + w[o * n_in + i] * x[s * n_in + i];
            }
            y.push(acc);
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn fc_backward<T: Real>(
    x: &[T],
    dy: &[T],
    n: usize,
    w: &[T],
    n_in: usize,
    n_out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * n_in];
    let mut dw = vec![T::zero(); n_out * n_in];
    let mut db = vec![T::zero(); n_out];
    for s in 0..n {
        for o in 0..n_out {
            let g = dy[s * n_out + o];
            db[o] = db[o] + g;
            for i in 0..n_in {
                dw[o * n_in + i] = dw[o * n_in + i] + g * x[s * n_in + i];
                dx[s * n_in + i] = dx[s * n_in + i] + g * w[o * n_in + i];
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [nx, ny, nz] = g.in_dims;
        let [ox, oy, oz] = g.out_dims;
        let k = g.k;
        let p = g.pad() as i64;
        let mut out = vec![0.0; g.cout * ox * oy * oz];
        for co in 0..g.cout {
            for z in 0..oz {
                for y in 0..oy {
                    for xo in 0..ox {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * g.stride + kz) as i64 - p;
                                        let iy = (y * g.stride + ky) as i64 - p;
                                        let ix = (xo * g.stride + kx) as i64 - p;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= nz as i64
                                            || iy >= ny as i64
                                            || ix >= nx as i64
                                        {
                                            continue;
                                        }
                                        let xi = ((ci * nz + iz as usize) * ny + iy as usize) * nx + ix as usize;
                                        let wi = (((co * g.cin + ci) * k + kz) * k + ky) * k + kx;
                                        acc += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        out[((co * oz + z) * oy + y) * ox + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, dims) in &[
            (3, 1, [5, 6, 4]),
            (3, 2, [7, 6, 5]),
            (1, 2, [5, 4, 6]),
            (1, 1, [3, 3, 3]),
            (3, 2, [2, 2, 2]),
        ] {
            let g = ConvGeom::new(2, 3, k, s, dims);
            let x = Tensor::from_vec(
                2,
                2,
                dims,
                (0..2 * 2 * dims.iter().product::<usize>())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
            let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv_forward(&x, &w, &g);
            for s in 0..2 {
                let want = naive_conv(x.sample(s), &w, &g);
                for (a, b) in y.sample(s).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "k{k} s{s}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom::new(2, 1, 3, 2, [5, 4, 6]);
        let x: Vec<f64> = (0..2 * 120).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..g.patch_len() * g.out_voxels())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut col = vec![0.0; c.len()];
        g.im2col(&x, &mut col);
        let mut back = vec![0.0; x.len()];
        g.col2im(&c, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bn_train_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(
            3,
            2,
            [2, 3, 2],
            (0..72).map(|_| rng.random_range(-3.0..5.0)).collect::<Vec<f64>>(),
        );
        let (y, _, (mean, var)) = bn_forward_train(&x, &[1.0, 1.0], &[0.0, 0.0]);
        let (m2, v2) = channel_stats(&y);
        for c in 0..2 {
            assert!(m2[c].abs() < 1e-12);
            assert!((v2[c] - 1.0).abs() < 1e-3);
            assert!(var[c] > 0.0 && mean[c].is_finite());
        }
    }
}
