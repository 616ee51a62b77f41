//! Inference on held-out subjects: order calls, predicted intervals, the
//! volumetric baseline, per-subject summary scores and the same-day set.

use std::collections::BTreeMap;
use std::time::Instant;

use deepatrophy_core::batch::{pack_pair, prepare_pair, AugmentRecord};
use deepatrophy_core::registration::HalfwayMaps;
use deepatrophy_core::sampler::{ScanPair, ScanRef, Variant};
use deepatrophy_core::store::{PairRecord, PreprocessedStore};
use deepatrophy_core::synth::{derived_rng, mix_seed, CohortLabel, ManifestSubject, MANIFEST_FILE};
use deepatrophy_net::{load_checkpoint, ActivationVector, Model, ValidationSet};
use deepatrophy_stats::baseline::{segment_volume, SegmentConfig};
use deepatrophy_stats::metrics::order_from_volume_change;
use deepatrophy_stats::progression::{
    age_correct, fit_pii_model, pairr, predict_pii, summary_slope, PiiModel, Window, DAYS_PER_YEAR,
};
use deepatrophy_stats::StatsError;
use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_store, load_manifest, load_records, load_scans, load_split, subjects_in, BEST_CKPT, PAIRS_FILE, SAMEDAY_FILE,
    SAMEDAY_PAIRS_FILE,
};
use crate::artifacts::{write, Run, StageManifest};
use crate::config::Stage;
use crate::error::{CliError, Result};
use crate::split::Split;

pub const PII_MODEL_FILE: &str = "pii_model.json";
pub const SCORED_PAIRS_FILE: &str = "pairs.csv";
pub const SAMEDAY_SCORES_FILE: &str = "sameday.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const BASELINE_SCORES_FILE: &str = "baseline_scores.csv";

const SALT_FIT: u64 = 0xF17;
const SALT_PRESENT: u64 = 0x9E5E;

/// One held-out pair `(i, j)` with `t_i < t_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub subject: String,
    pub cohort: CohortLabel,
    pub age: f64,
    pub i: usize,
    pub j: usize,
    pub t_i: f64,
    pub t_j: f64,
    /// Slot order used for the order call.
    pub presented_chronological: bool,
    pub sto_label: u8,
    pub sto_pred: u8,
    pub sto_score: f64,
    /// Predicted interval of the chronological presentation, days.
    pub pii: f64,
    pub pii_reversed: f64,
    /// Segmented structure volumes of scans `i` and `j`, mm^3.
    pub vol_i: f64,
    pub vol_j: f64,
    /// Baseline order call and ROC score for the presented order.
    pub baseline_pred: u8,
    pub baseline_score: f64,
}

impl ScoredPair {
    pub fn interval(&self) -> f64 {
        self.t_j - self.t_i
    }

    /// Relative volume change from scan `i` to scan `j`.
    pub fn volume_change(&self) -> f64 {
        (self.vol_j - self.vol_i) / self.vol_i
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamedayRow {
    pub subject: String,
    /// `ab` presents the first acquisition in slot 0.
    pub order: String,
    /// 1 when slot 1 holds the second acquisition.
    pub label: u8,
    pub pred: u8,
    pub score: f64,
    pub baseline_pred: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub subject: String,
    pub cohort: CohortLabel,
    pub window: String,
    pub age: f64,
    pub n_followups: usize,
    /// Per-year slope of PII against follow-up time.
    pub pii_slope: f64,
    pub pairr: f64,
    /// `pairr` after removing the control age trend.
    pub age_corrected_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineScoreRow {
    pub subject: String,
    pub cohort: CohortLabel,
    pub window: String,
    pub age: f64,
    pub n_followups: usize,
    /// Mean annualised structure loss, percent per year.
    pub atrophy_rate: f64,
    pub age_corrected_value: f64,
}

pub fn run(run: &Run) -> Result<StageManifest> {
    let started = Instant::now();
    let stage = Stage::Score;
    for up in [Stage::Synth, Stage::Preprocess, Stage::Train] {
        run.require(stage, up)?;
    }
    run.invalidate(stage)?;
    let dir = run.prepare(stage)?;
    let cfg = &run.cfg;
    let crop = cfg.train.augmentation.crop;
    let chunk = cfg.score.eval_chunk;

    let ckpt_path = run.path(Stage::Train, BEST_CKPT);
    let model = load_checkpoint(run.access(stage, &ckpt_path)?, Some(&cfg.encoder))?.model;
    let manifest = load_manifest(run, stage, MANIFEST_FILE)?;
    let split = load_split(run, stage)?;
    let records = load_records(run, stage, PAIRS_FILE)?;
    let fit_subjects: Vec<&ManifestSubject> = subjects_in(&manifest, &split, Split::Train)
        .filter(|s| s.cohort == cfg.score.fit_cohort)
        .collect();
    let test_subjects: Vec<&ManifestSubject> = subjects_in(&manifest, &split, Split::Test).collect();
    let store = build_store(
        run,
        stage,
        fit_subjects.iter().copied().chain(test_subjects.iter().copied()),
        records,
    )?;

    // Interval model on the fitting cohort's training pairs.
    let mut rng = derived_rng(mix_seed(cfg.seed, SALT_FIT), &[]);
    let mut fit_pairs = Vec::new();
    for s in &fit_subjects {
        for r in accepted(&store, &s.id) {
            let p = chronological(r);
            if cfg.score.both_orders {
                fit_pairs.push(reversed(&p));
                fit_pairs.push(p);
            } else if rng.random::<bool>() {
                fit_pairs.push(p);
            } else {
                fit_pairs.push(reversed(&p));
            }
        }
    }
    let fit_acts = infer(&model, &store, &fit_pairs, crop, chunk)?;
    let pii_model = fit_pii_model(
        &fit_acts.iter().map(|a| five(a)).collect::<Vec<_>>(),
        &fit_pairs.iter().map(ScanPair::signed_interval).collect::<Vec<_>>(),
    )?;
    info!(
        "interval model fitted on {} pairs; residual sd {:.1} days",
        pii_model.n_pairs, pii_model.residual_sd
    );
    write(&dir.join(PII_MODEL_FILE), serde_json::to_string_pretty(&pii_model)?)?;

    let seg = SegmentConfig::from_levels(
        cfg.cohort.phantom.background_level,
        cfg.cohort.phantom.structure_intensity,
    );
    let mut present_rng = derived_rng(mix_seed(cfg.seed, SALT_PRESENT), &[]);
    let mut scored = Vec::new();
    for s in &test_subjects {
        let scans = store
            .scans(&s.id)
            .ok_or_else(|| CliError::Data(format!("no scans for {}", s.id)))?;
        let vols: Vec<f64> = scans
            .iter()
            .map(|v| segment_volume(v, &seg))
            .collect::<std::result::Result<_, _>>()?;
        let recs: Vec<&PairRecord> = accepted(&store, &s.id).collect();
        let mut pairs = Vec::with_capacity(2 * recs.len());
        for r in &recs {
            let p = chronological(r);
            pairs.push(reversed(&p));
            pairs.push(p);
        }
        let acts = infer(&model, &store, &pairs, crop, chunk)?;
        for (k, r) in recs.iter().enumerate() {
            let (rev, chrono) = (&acts[2 * k], &acts[2 * k + 1]);
            let presented_chronological = present_rng.random::<bool>();
            let shown = if presented_chronological { chrono } else { rev };
            let change = (vols[r.j] - vols[r.i]) / vols[r.i];
            let shown_change = if presented_chronological {
                change
            } else {
                (vols[r.i] - vols[r.j]) / vols[r.j]
            };
            scored.push(ScoredPair {
                subject: s.id.clone(),
                cohort: s.cohort,
                age: s.age,
                i: r.i,
                j: r.j,
                t_i: r.t_i,
                t_j: r.t_j,
                presented_chronological,
                sto_label: u8::from(presented_chronological),
                sto_pred: shown.sto_class(),
                sto_score: shown.sto_score(),
                pii: predict_pii(&pii_model, &five(chrono)),
                pii_reversed: predict_pii(&pii_model, &five(rev)),
                vol_i: vols[r.i],
                vol_j: vols[r.j],
                baseline_pred: order_from_volume_change(shown_change),
                baseline_score: -shown_change,
            });
        }
    }
    info!(
        "scored {} held-out pairs from {} subjects",
        scored.len(),
        test_subjects.len()
    );
    write(&dir.join(SCORED_PAIRS_FILE), to_csv(&scored)?)?;

    let (scores, baseline) = summary_scores(&scored, &cfg.eval.windows, cfg.score.fit_cohort)?;
    write(&dir.join(SCORES_FILE), to_csv(&scores)?)?;
    write(&dir.join(BASELINE_SCORES_FILE), to_csv(&baseline)?)?;

    let sameday = score_sameday(run, &model, &seg)?;
    write(&dir.join(SAMEDAY_SCORES_FILE), to_csv(&sameday)?)?;

    run.finish(
        stage,
        &[
            PII_MODEL_FILE,
            SCORED_PAIRS_FILE,
            SCORES_FILE,
            BASELINE_SCORES_FILE,
            SAMEDAY_SCORES_FILE,
        ],
        started,
    )
}

fn five(a: &ActivationVector) -> [f64; 5] {
    a.0
}

fn accepted<'a>(store: &'a PreprocessedStore, subject: &'a str) -> impl Iterator<Item = &'a PairRecord> {
    store.records().filter(move |r| r.subject == subject && r.accepted)
}

fn chronological(r: &PairRecord) -> ScanPair {
    ScanPair {
        subject: r.subject.clone(),
        slot0: ScanRef {
            index: r.i,
            t_days: r.t_i,
        },
        slot1: ScanRef {
            index: r.j,
            t_days: r.t_j,
        },
        sto_label: 1,
        variant: Variant::A,
    }
}

fn reversed(p: &ScanPair) -> ScanPair {
    let mut q = p.swapped();
    q.variant = Variant::A;
    q
}

/// Centred variant-A activations, in input order.
fn infer(
    model: &Model<f32>,
    store: &PreprocessedStore,
    pairs: &[ScanPair],
    crop: [usize; 3],
    chunk: usize,
) -> Result<Vec<ActivationVector>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let set = ValidationSet::build(store, pairs, &[], crop)?;
    Ok(model.predict_f32(&set.pair_data, pairs.len(), chunk)?)
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|_| CliError::Data("csv output is not UTF-8".into()))
}

pub fn from_csv<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

/// Per subject and window, from the baseline-to-follow-up pairs whose
/// follow-up falls in the window. Age correction uses that window's
/// controls.
pub fn summary_scores(
    scored: &[ScoredPair],
    windows: &[Window],
    control: CohortLabel,
) -> Result<(Vec<ScoreRow>, Vec<BaselineScoreRow>)> {
    let mut net_rows = Vec::new();
    let mut base_rows = Vec::new();
    for w in windows {
        let mut by_subject: BTreeMap<&str, Vec<&ScoredPair>> = BTreeMap::new();
        for p in scored.iter().filter(|p| p.i == 0 && p.t_i == 0.0 && w.contains(p.t_j)) {
            by_subject.entry(&p.subject).or_default().push(p);
        }
        let mut rows = Vec::new();
        let mut brows = Vec::new();
        for (subject, ps) in by_subject {
            let points: Vec<(f64, f64)> = ps.iter().map(|p| (p.t_j, p.pii)).collect();
            let ratios: Vec<f64> = ps
                .iter()
                .map(|p| pairr(p.pii, p.interval()))
                .collect::<std::result::Result<_, _>>()?;
            let rates: Vec<f64> = ps
                .iter()
                .map(|p| -100.0 * p.volume_change() / (p.interval() / DAYS_PER_YEAR))
                .collect();
            let first = ps[0];
            rows.push(ScoreRow {
                subject: subject.to_string(),
                cohort: first.cohort,
                window: w.label(),
                age: first.age,
                n_followups: ps.len(),
                pii_slope: summary_slope(&points, 0.0)?,
                pairr: mean(&ratios),
                age_corrected_value: f64::NAN,
            });
            brows.push(BaselineScoreRow {
                subject: subject.to_string(),
                cohort: first.cohort,
                window: w.label(),
                age: first.age,
                n_followups: ps.len(),
                atrophy_rate: mean(&rates),
                age_corrected_value: f64::NAN,
            });
        }
        let net: Vec<(CohortLabel, f64, f64)> = rows.iter().map(|r| (r.cohort, r.age, r.pairr)).collect();
        for (r, c) in rows.iter_mut().zip(corrected(&net, control, w)?) {
            r.age_corrected_value = c;
        }
        let base: Vec<(CohortLabel, f64, f64)> = brows.iter().map(|r| (r.cohort, r.age, r.atrophy_rate)).collect();
        for (r, c) in brows.iter_mut().zip(corrected(&base, control, w)?) {
            r.age_corrected_value = c;
        }
        net_rows.extend(rows);
        base_rows.extend(brows);
    }
    Ok((net_rows, base_rows))
}

/// Age-corrected values of `(cohort, age, value)` rows, or NaN throughout
/// when the window has too few controls to fit the age trend.
pub fn corrected(rows: &[(CohortLabel, f64, f64)], control: CohortLabel, w: &Window) -> Result<Vec<f64>> {
    let controls: Vec<(f64, f64)> = rows.iter().filter(|r| r.0 == control).map(|r| (r.1, r.2)).collect();
    let all: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2)).collect();
    match age_correct(&controls, &all) {
        Ok((_, v)) => Ok(v),
        Err(StatsError::Invalid(m)) => {
            warn!("window {}: no age correction ({m})", w.label());
            Ok(vec![f64::NAN; rows.len()])
        }
        Err(e) => Err(e.into()),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Both presentation orders of every same-day pair. The `ba` order uses the
/// registration with its slot 0 (scan `b`) fixed.
fn score_sameday(run: &Run, model: &Model<f32>, seg: &SegmentConfig) -> Result<Vec<SamedayRow>> {
    let stage = Stage::Score;
    let cfg = &run.cfg;
    let crop = cfg.train.augmentation.crop;
    let manifest = load_manifest(run, stage, SAMEDAY_FILE)?;
    let records: BTreeMap<String, PairRecord> = load_records(run, stage, SAMEDAY_PAIRS_FILE)?
        .into_iter()
        .map(|r| (r.subject.clone(), r))
        .collect();
    let mut data = Vec::new();
    let mut rows = Vec::new();
    for s in &manifest.subjects {
        let rec = records
            .get(&s.id)
            .ok_or_else(|| CliError::Data(format!("no preprocessed same-day pair for {}", s.id)))?;
        let scans = load_scans(run, stage, s)?;
        let (a, b) = (&scans[0], &scans[1]);
        let maps = rec.maps()?;
        let swapped = HalfwayMaps {
            slot0: maps.variant_b.slot1,
            slot1: maps.variant_b.slot0,
        };
        let (va, vb) = (segment_volume(a, seg)?, segment_volume(b, seg)?);
        for (order, label, (h0, h1), change) in [
            ("ab", 1u8, maps.variant_a.apply(a, b), (vb - va) / va),
            ("ba", 0u8, swapped.apply(b, a), (va - vb) / vb),
        ] {
            let (c0, c1) = prepare_pair(&h0, &h1, crop, &AugmentRecord::centered(h0.dims(), crop)?)?;
            pack_pair(&c0, &c1, &mut data);
            rows.push(SamedayRow {
                subject: s.id.clone(),
                order: order.to_string(),
                label,
                pred: 0,
                score: 0.0,
                baseline_pred: order_from_volume_change(change),
            });
        }
    }
    if rows.is_empty() {
        return Ok(rows);
    }
    let acts = model.predict_f32(&data, rows.len(), cfg.score.eval_chunk)?;
    for (r, a) in rows.iter_mut().zip(&acts) {
        r.pred = a.sto_class();
        r.score = a.sto_score();
    }
    Ok(rows)
}

/// The fitted interval model, reloaded by evaluation.
pub fn load_pii_model(run: &Run, reader: Stage) -> Result<PiiModel> {
    run.read_json(reader, &run.path(Stage::Score, PII_MODEL_FILE))
}
