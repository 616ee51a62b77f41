//! Pipeline stages. Each stage checks its upstream manifests, reads only
//! through the run's guarded accessors, and writes its own manifest last.

pub mod eval;
pub mod preprocess;
pub mod score;
pub mod sweep;
pub mod synth;
pub mod train;

use std::collections::BTreeMap;

use deepatrophy_core::io::decode_volume;
use deepatrophy_core::store::{PairRecord, PreprocessedStore};
use deepatrophy_core::synth::{Manifest, ManifestSubject};
use deepatrophy_core::volume::Volume3D;
use rayon::prelude::*;

use crate::artifacts::Run;
use crate::config::Stage;
use crate::error::Result;
use crate::split::{self, Split};

pub const SAMEDAY_FILE: &str = "sameday.json";
pub const PAIRS_FILE: &str = "pairs.json";
pub const SAMEDAY_PAIRS_FILE: &str = "sameday_pairs.json";
pub const QC_FILE: &str = "qc.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

pub fn load_manifest(run: &Run, reader: Stage, file: &str) -> Result<Manifest> {
    run.read_json(reader, &run.path(Stage::Synth, file))
}

pub fn load_scans(run: &Run, reader: Stage, subject: &ManifestSubject) -> Result<Vec<Volume3D>> {
    let root = run.stage_dir(Stage::Synth);
    subject
        .scans
        .iter()
        .map(|s| {
            let p = root.join(&s.path);
            let bytes = run.read(reader, &p)?;
            Ok(decode_volume(&bytes, &p)?)
        })
        .collect()
}

pub fn load_records(run: &Run, reader: Stage, file: &str) -> Result<Vec<PairRecord>> {
    run.read_json(reader, &run.path(Stage::Preprocess, file))
}

pub fn load_split(run: &Run, reader: Stage) -> Result<BTreeMap<String, Split>> {
    split::parse_csv(&run.read_string(reader, &run.path(Stage::Preprocess, SPLIT_FILE))?)
}

/// Preprocessed store holding the scans of the selected subjects and every
/// pair record.
pub fn build_store<'a>(
    run: &Run,
    reader: Stage,
    subjects: impl IntoIterator<Item = &'a ManifestSubject>,
    records: Vec<PairRecord>,
) -> Result<PreprocessedStore> {
    let subjects: Vec<&ManifestSubject> = subjects.into_iter().collect();
    let scans: Vec<Vec<Volume3D>> = subjects
        .par_iter()
        .map(|s| load_scans(run, reader, s))
        .collect::<Result<_>>()?;
    let mut store = PreprocessedStore::new();
    for (s, v) in subjects.iter().zip(scans) {
        store.insert_scans(&s.id, v);
    }
    for r in records {
        store.insert_record(r);
    }
    Ok(store)
}

pub fn days(subject: &ManifestSubject) -> Vec<f64> {
    subject.scans.iter().map(|s| s.t_days).collect()
}

pub fn subjects_in<'a>(
    manifest: &'a Manifest,
    split: &'a BTreeMap<String, Split>,
    which: Split,
) -> impl Iterator<Item = &'a ManifestSubject> {
    manifest
        .subjects
        .iter()
        .filter(move |s| split.get(&s.id) == Some(&which))
}

/// `(accepted, rejected)` pair counts from the QC table.
pub fn preprocess_qc_counts(run: &Run, reader: Stage) -> Result<(usize, usize)> {
    let text = run.read_string(reader, &run.path(Stage::Preprocess, QC_FILE))?;
    let (mut accepted, mut rejected) = (0, 0);
    for line in text.lines().skip(1) {
        match line.rsplit(',').next() {
            Some("true") => accepted += 1,
            Some("false") => rejected += 1,
            _ => {}
        }
    }
    Ok((accepted, rejected))
}
