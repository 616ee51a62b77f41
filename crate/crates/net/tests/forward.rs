mod common;

use common::random_model;
use deepatrophy_core::Volume3D;
use deepatrophy_net::{EncoderConfig, Mode, Model, NetError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[c][z][y][x]` activations.
type Act = Vec<Vec<Vec<Vec<f64>>>>;

fn p<'a>(m: &'a Model<f64>, name: &str) -> &'a [f64] {
    m.tensor(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn conv(x: &Act, w: &[f64], cout: usize, k: usize, stride: usize) -> Act {
    let cin = x.len();
    let (nz, ny, nx) = (x[0].len(), x[0][0].len(), x[0][0][0].len());
    let pad = (k / 2) as i64;
    let out = |n: usize| (n + 2 * (k / 2) - k) / stride + 1;
    let mut y = vec![vec![vec![vec![0.0; out(nx)]; out(ny)]; out(nz)]; cout];
    for (co, yc) in y.iter_mut().enumerate() {
        for (oz, yz) in yc.iter_mut().enumerate() {
            for (oy, yy) in yz.iter_mut().enumerate() {
                for (ox, v) in yy.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (ci, xc) in x.iter().enumerate() {
                        for dz in 0..k {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let iz = (oz * stride + dz) as i64 - pad;
                                    let iy = (oy * stride + dy) as i64 - pad;
                                    let ix = (ox * stride + dx) as i64 - pad;
                                    if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= nz as i64
                                        || iy >= ny as i64
                                        || ix >= nx as i64
                                    {
                                        continue;
                                    }
                                    let wi = (((co * cin + ci) * k + dz) * k + dy) * k + dx;
                                    acc += w[wi] * xc[iz as usize][iy as usize][ix as usize];
                                }
                            }
                        }
                    }
                    *v = acc;
                }
            }
        }
    }
    y
}

fn bn(x: &mut Act, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) {
    for (c, xc) in x.iter_mut().enumerate() {
        for v in xc.iter_mut().flatten().flatten() {
            *v = gamma[c] * (*v - mean[c]) / (var[c] + 1e-5).sqrt() + beta[c];
        }
    }
}

fn relu(x: &mut Act) {
    for v in x.iter_mut().flatten().flatten().flatten() {
        *v = v.max(0.0);
    }
}

struct Oracle<'a> {
    m: &'a Model<f64>,
    slot: usize,
}

impl Oracle<'_> {
    fn conv_bn(&mut self, x: &Act, name: &str, cout: usize, k: usize, stride: usize) -> Act {
        let mut y = conv(x, p(self.m, &format!("{name}.conv")), cout, k, stride);
        let (mean, var) = (
            self.m.running_mean[self.slot].clone(),
            self.m.running_var[self.slot].clone(),
        );
        self.slot += 1;
        bn(
            &mut y,
            p(self.m, &format!("{name}.bn.gamma")),
            p(self.m, &format!("{name}.bn.beta")),
            &mean,
            &var,
        );
        y
    }

    fn forward(&mut self, v0: &Volume3D, v1: &Volume3D) -> Vec<f64> {
        self.slot = 0;
        let cfg = self.m.config().clone();
        let [nx, ny, nz] = cfg.input_dims;
        let grid = |v: &Volume3D| -> Vec<Vec<Vec<f64>>> {
            (0..nz)
                .map(|z| {
                    (0..ny)
                        .map(|y| (0..nx).map(|x| v.data()[(z * ny + y) * nx + x] as f64).collect())
                        .collect()
                })
                .collect()
        };
        let x = vec![grid(v0), grid(v1)];
        let mut h = self.conv_bn(&x, "stem", cfg.stem_channels, 3, cfg.stem_stride);
        relu(&mut h);
        let mut cin = cfg.stem_channels;
        for (si, stage) in cfg.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{}", si + 1, bi + 1);
                let mut a = self.conv_bn(&h, &format!("{name}.a"), stage.channels, 3, stride);
                relu(&mut a);
                let mut b = self.conv_bn(&a, &format!("{name}.b"), stage.channels, 3, 1);
                let s = if stride != 1 || cin != stage.channels {
                    self.conv_bn(&h, &format!("{name}.shortcut"), stage.channels, 1, stride)
                } else {
                    h.clone()
                };
                for (bv, sv) in b
                    .iter_mut()
                    .flatten()
                    .flatten()
                    .flatten()
                    .zip(s.iter().flatten().flatten().flatten())
                {
                    *bv += sv;
                }
                relu(&mut b);
                h = b;
                cin = stage.channels;
            }
        }
        let pooled: Vec<f64> = h
            .iter()
            .map(|c| {
                let vals: Vec<f64> = c.iter().flatten().flatten().copied().collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect();
        let (w, b) = (p(self.m, "head.fc.weight"), p(self.m, "head.fc.bias"));
        (0..5)
            .map(|o| b[o] + (0..cin).map(|i| w[o * cin + i] * pooled[i]).sum::<f64>())
            .collect()
    }

    fn risi(&self, a1: &[f64], a2: &[f64]) -> Vec<f64> {
        let cat: Vec<f64> = a1.iter().chain(a2).copied().collect();
        let (w, b) = (p(self.m, "risi.fc.weight"), p(self.m, "risi.fc.bias"));
        (0..4)
            .map(|o| b[o] + (0..10).map(|i| w[o * 10 + i] * cat[i]).sum::<f64>())
            .collect()
    }
}

fn volume(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume3D {
    Volume3D::from_fn(dims, [1.0; 3], |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
}

#[test]
fn forward_matches_naive_oracle() {
    let cfg = EncoderConfig::tiny();
    assert_eq!(cfg.stages.iter().map(|s| s.blocks).sum::<usize>(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..3 {
        let m = random_model(&cfg, seed);
        let (v0, v1) = (volume(cfg.input_dims, &mut rng), volume(cfg.input_dims, &mut rng));
        let got = m.forward_basic(&v0, &v1).unwrap();
        let want = Oracle { m: &m, slot: 0 }.forward(&v0, &v1);
        for (g, w) in got.0.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5, "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn strided_stem_config_matches_oracle() {
    let cfg = EncoderConfig {
        input_dims: [8, 6, 7],
        stem_stride: 2,
        ..EncoderConfig::tiny()
    };
    let m = random_model(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (v0, v1) = (volume(cfg.input_dims, &mut rng), volume(cfg.input_dims, &mut rng));
    let got = m.forward_basic(&v0, &v1).unwrap();
    let want = Oracle { m: &m, slot: 0 }.forward(&v0, &v1);
    for (g, w) in got.0.iter().zip(&want) {
        assert!((g - w).abs() < 1e-5);
    }
}

#[test]
fn siamese_matches_oracle_and_shares_weights() {
    let cfg = EncoderConfig::tiny();
    let m = random_model(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<Volume3D> = (0..4).map(|_| volume(cfg.input_dims, &mut rng)).collect();
    let (a1, a2, logits) = m.forward_siamese((&v[0], &v[1]), (&v[2], &v[3])).unwrap();
    let mut o = Oracle { m: &m, slot: 0 };
    let (w1, w2) = (o.forward(&v[0], &v[1]), o.forward(&v[2], &v[3]));
    let wl = o.risi(&w1, &w2);
    for (g, w) in
        a1.0.iter()
            .chain(&a2.0)
            .chain(&logits)
            .zip(w1.iter().chain(&w2).chain(&wl))
    {
        assert!((g - w).abs() < 1e-5);
    }

    let (b1, b2, _) = m.forward_siamese((&v[0], &v[1]), (&v[0], &v[1])).unwrap();
    assert_eq!(b1, b2);
    assert_eq!(b1, m.forward_basic(&v[0], &v[1]).unwrap());
}

#[test]
fn half_swap_symmetric_head_permutes_categories() {
    let cfg = EncoderConfig::tiny();
    let mut m = random_model(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // W[3 - c][j] = W[c][(j + 5) % 10] and b[3 - c] = b[c].
    let mut w = [[0.0; 10]; 4];
    for c in 0..2 {
        for j in 0..10 {
            w[c][j] = rng.random_range(-1.0..1.0);
        }
        for j in 0..10 {
            w[3 - c][j] = w[c][(j + 5) % 10];
        }
    }
    m.tensor_mut("risi.fc.weight").unwrap().copy_from_slice(&w.concat());
    m.tensor_mut("risi.fc.bias")
        .unwrap()
        .copy_from_slice(&[0.2, -0.4, -0.4, 0.2]);
    let v: Vec<Volume3D> = (0..4).map(|_| volume(cfg.input_dims, &mut rng)).collect();
    let (_, _, l) = m.forward_siamese((&v[0], &v[1]), (&v[2], &v[3])).unwrap();
    let (_, _, s) = m.forward_siamese((&v[2], &v[3]), (&v[0], &v[1])).unwrap();
    for c in 0..4 {
        assert!((s[c] - l[3 - c]).abs() < 1e-12);
    }
}

#[test]
fn zero_head_outputs_its_bias() {
    let cfg = EncoderConfig::tiny();
    let mut m = random_model(&cfg, 10);
    m.tensor_mut("head.fc.weight").unwrap().fill(0.0);
    let bias = [0.5, -1.0, 2.0, 0.0, 3.5];
    m.tensor_mut("head.fc.bias").unwrap().copy_from_slice(&bias);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3 {
        let (v0, v1) = (volume(cfg.input_dims, &mut rng), volume(cfg.input_dims, &mut rng));
        assert_eq!(m.forward_basic(&v0, &v1).unwrap().0, bias);
    }
}

#[test]
fn eval_forward_is_deterministic_and_per_sample() {
    let cfg = EncoderConfig::tiny();
    let m = random_model(&cfg, 11).cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vols: Vec<Volume3D> = (0..6).map(|_| volume(cfg.input_dims, &mut rng)).collect();
    let single: Vec<_> = (0..3)
        .map(|i| m.forward_basic(&vols[2 * i], &vols[2 * i + 1]).unwrap())
        .collect();
    assert_eq!(single[0], m.forward_basic(&vols[0], &vols[1]).unwrap());
    let mut data = Vec::new();
    for v in &vols {
        data.extend_from_slice(v.data());
    }
    assert_eq!(m.predict_f32(&data, 3, 2).unwrap(), single);
    assert_eq!(m.predict(&data, 3, Mode::Eval).unwrap(), single);
}

#[test]
fn mismatched_dims_are_shape_errors() {
    let cfg = EncoderConfig::tiny();
    let m = random_model(&cfg, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let good = volume(cfg.input_dims, &mut rng);
    let bad = volume([6, 6, 6], &mut rng);
    assert!(matches!(m.forward_basic(&good, &bad), Err(NetError::Shape(_))));
    assert!(matches!(
        m.forward_siamese((&good, &good), (&bad, &good)),
        Err(NetError::Shape(_))
    ));
}
