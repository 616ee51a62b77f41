use std::collections::BTreeMap;

use deepatrophy_cli::config::SplitConfig;
use deepatrophy_cli::split::{assign, parse_csv, to_csv, Split};
use deepatrophy_cli::{CliError, ExperimentConfig, Stage};
use deepatrophy_core::synth::{CohortLabel, Manifest, ManifestScan, ManifestSubject};

#[test]
fn example_config_matches_the_defaults() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/example.toml")).unwrap();
    let example = ExperimentConfig::from_toml(&text)
        .unwrap()
        .resolve(None, Some("x".into()))
        .unwrap();
    let defaults = ExperimentConfig::default().resolve(None, Some("x".into())).unwrap();
    assert_eq!(example, defaults);
}

#[test]
fn resolved_config_round_trips_through_toml() {
    let cfg = ExperimentConfig::default()
        .resolve(Some(42), Some("runs/rt".into()))
        .unwrap();
    let back = ExperimentConfig::from_toml(&cfg.to_toml())
        .unwrap()
        .resolve(None, None)
        .unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.stage_hash(Stage::Eval), cfg.stage_hash(Stage::Eval));
}

#[test]
fn invalid_configs_are_rejected() {
    let unknown = ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
    assert!(matches!(unknown, CliError::Config(_)));
    assert_eq!(unknown.exit_code(), 2);

    let mut crop = ExperimentConfig::default();
    crop.train.augmentation.crop = [20, 32, 24];
    assert!(matches!(crop.validate(), Err(CliError::Config(_))));

    let mut lr = ExperimentConfig::default();
    lr.train.lr = -1.0;
    assert!(matches!(lr.validate(), Err(CliError::Config(_))));

    let mut split = ExperimentConfig::default();
    split.split.train = 0.9;
    split.split.val = 0.2;
    assert!(matches!(split.validate(), Err(CliError::Config(_))));
}

#[test]
fn output_directory_does_not_enter_the_hash() {
    let a = ExperimentConfig::default().resolve(None, Some("a".into())).unwrap();
    let b = ExperimentConfig::default().resolve(None, Some("b".into())).unwrap();
    let c = ExperimentConfig::default().resolve(Some(1), Some("a".into())).unwrap();
    assert_eq!(a.stage_hash(Stage::Eval), b.stage_hash(Stage::Eval));
    assert_ne!(a.stage_hash(Stage::Synth), c.stage_hash(Stage::Synth));
}

fn manifest(per_cohort: usize, short: usize) -> Manifest {
    let mut subjects = Vec::new();
    for label in CohortLabel::ALL {
        for i in 0..per_cohort {
            let n = if i < short { 2 } else { 4 };
            subjects.push(ManifestSubject {
                id: format!("{label}-{i:03}"),
                cohort: label,
                age: 70.0,
                scans: (0..n)
                    .map(|k| ManifestScan {
                        path: String::new(),
                        t_days: 180.0 * k as f64,
                    })
                    .collect(),
                warnings: Vec::new(),
            });
        }
    }
    Manifest { subjects }
}

fn count(split: &BTreeMap<String, Split>, label: CohortLabel, which: Split) -> usize {
    split
        .iter()
        .filter(|(id, s)| id.starts_with(label.as_str()) && **s == which)
        .count()
}

#[test]
fn split_is_stratified_deterministic_and_round_trips() {
    let m = manifest(20, 2);
    let cfg = SplitConfig {
        train_count: Some(8),
        val_count: Some(2),
        ..SplitConfig::default()
    };
    let s = assign(&m, &cfg, 11);
    assert_eq!(s, assign(&m, &cfg, 11));
    assert_ne!(s, assign(&m, &cfg, 12));
    for label in CohortLabel::ALL {
        assert_eq!(count(&s, label, Split::Train), 8);
        assert_eq!(count(&s, label, Split::Val), 2);
        assert_eq!(count(&s, label, Split::Test), 10);
    }
    // Subjects too short for nested quads are always held out.
    for id in ["CTL-000", "CTL-001", "LMCI-000"] {
        assert_eq!(s[id], Split::Test);
    }
    assert_eq!(parse_csv(&to_csv(&m, &s)).unwrap(), s);
}

#[test]
fn split_fractions_round_per_cohort() {
    let m = manifest(10, 0);
    let s = assign(&m, &SplitConfig::default(), 0);
    for label in CohortLabel::ALL {
        // 0.45 * 10 and 0.05 * 10 round to 5 and 1 (half away from zero).
        assert_eq!(count(&s, label, Split::Train), 5);
        assert_eq!(count(&s, label, Split::Val), 1);
    }
}
