//! Subject-level train / validation / test split, stratified by cohort.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use deepatrophy_core::synth::{derived_rng, CohortLabel, Manifest};
use rand::seq::SliceRandom;

use crate::config::SplitConfig;
use crate::error::{CliError, Result};

const SALT_SPLIT: u64 = 0x5B17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CliError::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// Assigns every subject to a split. Within each cohort the eligible
/// subjects (enough scans to form nested quads) are shuffled with a seeded
/// RNG; the first go to training, the next to validation, the rest to test.
/// Ineligible subjects always go to test.
pub fn assign(manifest: &Manifest, cfg: &SplitConfig, seed: u64) -> BTreeMap<String, Split> {
    let mut by_cohort: BTreeMap<CohortLabel, Vec<&str>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for s in &manifest.subjects {
        if s.scans.len() >= cfg.min_scans_for_training {
            by_cohort.entry(s.cohort).or_default().push(&s.id);
        } else {
            out.insert(s.id.clone(), Split::Test);
        }
    }
    for (label, mut ids) in by_cohort {
        ids.sort_unstable();
        let mut rng = derived_rng(seed, &[SALT_SPLIT, label as u64]);
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = cfg
            .train_count
            .unwrap_or((cfg.train * n as f64).round() as usize)
            .min(n);
        let n_val = cfg
            .val_count
            .unwrap_or((cfg.val * n as f64).round() as usize)
            .min(n - n_train);
        for (k, id) in ids.into_iter().enumerate() {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            out.insert(id.to_string(), split);
        }
    }
    out
}

pub fn to_csv(manifest: &Manifest, split: &BTreeMap<String, Split>) -> String {
    let mut s = String::from("subject,cohort,split\n");
    for subj in &manifest.subjects {
        s.push_str(&format!("{},{},{}\n", subj.id, subj.cohort, split[&subj.id]));
    }
    s
}

pub fn parse_csv(text: &str) -> Result<BTreeMap<String, Split>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(CliError::Data(format!("split file line {}: expected 3 fields", n + 1)));
        }
        out.insert(f[0].to_string(), f[2].parse()?);
    }
    Ok(out)
}
