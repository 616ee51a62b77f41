//! Cohort synthesis plus the same-day test-retest set.

use std::fs;
use std::time::Instant;

use deepatrophy_core::io::save_volume;
use deepatrophy_core::synth::{
    derived_rng, generate_cohort, make_phantom, simulate_timepoint, CohortLabel, ConfoundDraw, Manifest, ManifestScan,
    ManifestSubject, MANIFEST_FILE,
};
use log::info;
use rand::Rng;
use rayon::prelude::*;

use super::SAMEDAY_FILE;
use crate::artifacts::{write, Run, StageManifest};
use crate::config::{ExperimentConfig, Stage};
use crate::error::{CliError, Result};

const SALT_SAMEDAY: u64 = 0x5A3E_DA7;

pub fn run(run: &Run) -> Result<StageManifest> {
    let started = Instant::now();
    run.invalidate(Stage::Synth)?;
    let dir = run.prepare(Stage::Synth)?;
    let cfg = &run.cfg;
    let specs = cfg.cohort.resolved_specs();
    let (_, subjects) = generate_cohort(&specs, cfg.seed, &cfg.cohort.phantom, &dir)?;
    let n_scans: usize = subjects.iter().map(|s| s.scans.len()).sum();
    info!("synthesised {} subjects, {n_scans} scans", subjects.len());
    let sameday = generate_sameday(cfg, &dir)?;
    write(&dir.join(SAMEDAY_FILE), serde_json::to_string_pretty(&sameday)?)?;
    info!("synthesised {} same-day scan pairs", sameday.subjects.len());
    // The truth file is deliberately not hashed here: downstream stages
    // verify these outputs and must never open it.
    run.finish(Stage::Synth, &[MANIFEST_FILE, SAMEDAY_FILE], started)
}

/// Each same-day subject contributes two structures, each imaged twice at
/// day 0 with independent acquisition confounds and no atrophy.
fn generate_sameday(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<Manifest> {
    let vol_dir = dir.join("sameday").join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| CliError::io(&vol_dir, e))?;
    let jobs: Vec<(usize, usize)> = (0..cfg.cohort.sameday_subjects)
        .flat_map(|s| [(s, 0), (s, 1)])
        .collect();
    let subjects = jobs
        .par_iter()
        .map(|&(s, side)| -> Result<ManifestSubject> {
            let age = derived_rng(cfg.seed, &[SALT_SAMEDAY, s as u64]).random_range(65.0..85.0);
            let mut rng = derived_rng(cfg.seed, &[SALT_SAMEDAY, s as u64, side as u64 + 1]);
            let (phantom, _, _) = make_phantom(rng.random(), &cfg.cohort.phantom)?;
            let id = format!("SD-{s:03}-{}", ["L", "R"][side]);
            let mut scans = Vec::with_capacity(2);
            for tag in ["a", "b"] {
                let draw = ConfoundDraw::draw(&cfg.cohort.confounds, &mut rng);
                let (img, _) = simulate_timepoint(&phantom, 0.0, 0.0, &draw, false);
                let rel = format!("sameday/volumes/{id}_{tag}.davol");
                save_volume(&img, dir.join(&rel))?;
                scans.push(ManifestScan { path: rel, t_days: 0.0 });
            }
            Ok(ManifestSubject {
                id,
                cohort: CohortLabel::Ctl,
                age,
                scans,
                warnings: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Manifest { subjects })
}
