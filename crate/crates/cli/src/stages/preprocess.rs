//! Symmetric half-way registration, SSIM quality control and the subject
//! split.

use std::time::Instant;

use deepatrophy_core::ssim::qc_gate;
use deepatrophy_core::store::{preprocess_pair, preprocess_subject, PairRecord};
use deepatrophy_core::synth::MANIFEST_FILE;
use log::info;
use rayon::prelude::*;

use super::{days, load_manifest, load_scans, PAIRS_FILE, QC_FILE, SAMEDAY_FILE, SAMEDAY_PAIRS_FILE, SPLIT_FILE};
use crate::artifacts::{write, Run, StageManifest};
use crate::config::Stage;
use crate::error::Result;
use crate::split;

pub fn run(run: &Run) -> Result<StageManifest> {
    let started = Instant::now();
    let stage = Stage::Preprocess;
    run.require(stage, Stage::Synth)?;
    run.invalidate(stage)?;
    let dir = run.prepare(stage)?;
    let cfg = &run.cfg;

    let manifest = load_manifest(run, stage, MANIFEST_FILE)?;
    let per_subject: Vec<Vec<PairRecord>> = manifest
        .subjects
        .par_iter()
        .map(|s| {
            let scans = load_scans(run, stage, s)?;
            Ok(preprocess_subject(&s.id, &days(s), &scans, &cfg.preprocess)?)
        })
        .collect::<Result<_>>()?;
    let records: Vec<PairRecord> = per_subject.into_iter().flatten().collect();
    let qc = qc_gate(records.iter().map(|r| (r.id(), r.ssim())), cfg.preprocess.qc_threshold);
    info!(
        "registered {} pairs; {} pass QC, {} rejected",
        qc.total(),
        qc.accepted.len(),
        qc.rejected.len()
    );
    write(&dir.join(PAIRS_FILE), serde_json::to_string_pretty(&records)?)?;
    write(&dir.join(QC_FILE), qc.to_csv())?;

    let sameday = load_manifest(run, stage, SAMEDAY_FILE)?;
    let sameday_records: Vec<PairRecord> = sameday
        .subjects
        .par_iter()
        .map(|s| {
            let scans = load_scans(run, stage, s)?;
            Ok(preprocess_pair(
                &s.id,
                (0, 0.0, &scans[0]),
                (1, 0.0, &scans[1]),
                &cfg.preprocess,
            )?)
        })
        .collect::<Result<_>>()?;
    write(
        &dir.join(SAMEDAY_PAIRS_FILE),
        serde_json::to_string_pretty(&sameday_records)?,
    )?;

    let assignment = split::assign(&manifest, &cfg.split, cfg.seed);
    write(&dir.join(SPLIT_FILE), split::to_csv(&manifest, &assignment))?;
    run.finish(stage, &[PAIRS_FILE, QC_FILE, SAMEDAY_PAIRS_FILE, SPLIT_FILE], started)
}
