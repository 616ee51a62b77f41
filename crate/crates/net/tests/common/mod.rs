#![allow(dead_code)]

use deepatrophy_net::{EncoderConfig, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_input(cfg: &EncoderConfig, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * cfg.in_channels * cfg.input_dims.iter().product::<usize>();
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Seeded init plus non-trivial scales, shifts and running statistics.
pub fn random_model(cfg: &EncoderConfig, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for t in m.arch().tensors.clone() {
        if t.name.ends_with(".gamma") || t.name.ends_with(".beta") || t.name.ends_with(".bias") {
            for p in &mut m.params[t.offset..t.offset + t.len] {
                *p += rng.random_range(-0.3..0.3);
            }
        }
    }
    for v in m.running_mean.iter_mut().flatten() {
        *v = rng.random_range(-0.2..0.2);
    }
    for v in m.running_var.iter_mut().flatten() {
        *v = rng.random_range(0.5..2.0);
    }
    m
}
