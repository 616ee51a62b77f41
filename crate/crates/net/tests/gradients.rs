mod common;

use common::{random_input, random_model};
use deepatrophy_net::{grad_check, EncoderConfig, GradCheckConfig, LossWeights, Mode, ParamSet, QuadTargets};

const LABELS: [u8; 4] = [1, 0, 0, 1];
const CATEGORIES: [usize; 2] = [2, 0];

fn targets() -> QuadTargets<'static> {
    QuadTargets {
        sto_labels: &LABELS,
        categories: &CATEGORIES,
    }
}

#[test]
fn full_tiny_config_matches_finite_differences() {
    let cfg = EncoderConfig::tiny();
    for seed in 0..3 {
        let m = random_model(&cfg, seed);
        let x = random_input(&cfg, 4, 50 + seed);
        let r = grad_check(
            &m,
            &x,
            targets(),
            &LossWeights::default(),
            &GradCheckConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.entries.len(), 64);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {:?}", r.worst());
    }
}

#[test]
fn heads_only_are_exact_to_roundoff() {
    let cfg = EncoderConfig::tiny();
    let m = random_model(&cfg, 4);
    let x = random_input(&cfg, 4, 9);
    let gc = GradCheckConfig {
        set: ParamSet::Heads,
        ..Default::default()
    };
    let r = grad_check(&m, &x, targets(), &LossWeights::default(), &gc).unwrap();
    assert!(r
        .entries
        .iter()
        .all(|e| e.tensor.starts_with("head.") || e.tensor.starts_with("risi.")));
    assert!(r.max_rel_error < 1e-7, "{:?}", r.worst());
}

#[test]
fn corrupted_gradient_is_caught() {
    let cfg = EncoderConfig::tiny();
    let m = random_model(&cfg, 5);
    let x = random_input(&cfg, 4, 10);
    let gc = GradCheckConfig {
        corrupt: true,
        ..Default::default()
    };
    let r = grad_check(&m, &x, targets(), &LossWeights::default(), &gc).unwrap();
    assert!(r.max_rel_error > 0.3, "{}", r.max_rel_error);
}

#[test]
fn sto_only_loss_ignores_risi_head() {
    let cfg = EncoderConfig::tiny();
    let mut m = random_model(&cfg, 6);
    let x = random_input(&cfg, 4, 11);
    let w = LossWeights {
        w_sto: 1.0,
        w_risi: 0.0,
    };
    let before = m.batch_loss(&x, targets(), &w, Mode::Train).unwrap();
    for v in m.tensor_mut("risi.fc.weight").unwrap() {
        *v = 1e6;
    }
    assert_eq!(before, m.batch_loss(&x, targets(), &w, Mode::Train).unwrap());
    let g = m.loss_and_grad(&x, targets(), &w).unwrap().grad;
    let r = m.arch().tensor("risi.fc.weight").unwrap().clone();
    assert!(g[r.offset..m.n_params()].iter().all(|&v| v == 0.0));
}

#[test]
fn step_outside_range_is_rejected() {
    let cfg = EncoderConfig::tiny();
    let m = random_model(&cfg, 7);
    let x = random_input(&cfg, 4, 12);
    let gc = GradCheckConfig {
        eps: 0.1,
        ..Default::default()
    };
    assert!(grad_check(&m, &x, targets(), &LossWeights::default(), &gc).is_err());
}
