//! Registered scan pairs: the two half-way maps of every canonical pair,
//! their SSIM scores and QC verdict, plus lazy resampling into half-way
//! space for any slot order and variant.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{symmetric_pair_maps, HalfwayMaps, RegistrationConfig, SymmetricMaps};
use crate::rigid::{RigidTransform, TransformJson};
use crate::sampler::{ScanPair, Variant};
use crate::ssim::{qc_gate, ssim, QcReport, SsimConfig, DEFAULT_QC_THRESHOLD};
use crate::volume::Volume3D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub registration: RegistrationConfig,
    pub ssim: SsimConfig,
    pub qc_threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            ssim: SsimConfig::default(),
            qc_threshold: DEFAULT_QC_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapsJson {
    pub slot0: TransformJson,
    pub slot1: TransformJson,
}

impl MapsJson {
    fn from_maps(m: &HalfwayMaps) -> Self {
        Self {
            slot0: m.slot0.to_json(),
            slot1: m.slot1.to_json(),
        }
    }

    fn to_maps(&self) -> Result<HalfwayMaps> {
        Ok(HalfwayMaps {
            slot0: RigidTransform::from_json(&self.slot0)?,
            slot1: RigidTransform::from_json(&self.slot1)?,
        })
    }
}

/// One registered pair in canonical order: scan `i` is earlier than scan `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub subject: String,
    pub i: usize,
    pub j: usize,
    pub t_i: f64,
    pub t_j: f64,
    pub variant_a: MapsJson,
    pub variant_b: MapsJson,
    pub ncc_a: f64,
    pub ncc_b: f64,
    pub ssim_a: f64,
    pub ssim_b: f64,
    pub accepted: bool,
}

impl PairRecord {
    pub fn id(&self) -> String {
        pair_id(&self.subject, self.i, self.j)
    }

    /// Score used by the QC gate: the worse of the two variants.
    pub fn ssim(&self) -> f64 {
        self.ssim_a.min(self.ssim_b)
    }

    pub fn maps(&self) -> Result<SymmetricMaps> {
        Ok(SymmetricMaps {
            variant_a: self.variant_a.to_maps()?,
            variant_b: self.variant_b.to_maps()?,
            ncc_a: self.ncc_a,
            ncc_b: self.ncc_b,
        })
    }
}

pub fn pair_id(subject: &str, i: usize, j: usize) -> String {
    format!("{subject}:{i}-{j}")
}

/// Registers the canonical pair (`vi` earlier than `vj`) both ways and scores
/// both half-way variants with SSIM.
pub fn preprocess_pair(
    subject: &str,
    (i, t_i, vi): (usize, f64, &Volume3D),
    (j, t_j, vj): (usize, f64, &Volume3D),
    cfg: &PreprocessConfig,
) -> Result<PairRecord> {
    vi.check_same_dims(vj)?;
    let maps = symmetric_pair_maps(vi, vj, &cfg.registration)?;
    let (a0, a1) = maps.variant_a.apply(vi, vj);
    let (b0, b1) = maps.variant_b.apply(vi, vj);
    let ssim_a = ssim(&a0, &a1, &cfg.ssim)?;
    let ssim_b = ssim(&b0, &b1, &cfg.ssim)?;
    Ok(PairRecord {
        subject: subject.to_string(),
        i,
        j,
        t_i,
        t_j,
        variant_a: MapsJson::from_maps(&maps.variant_a),
        variant_b: MapsJson::from_maps(&maps.variant_b),
        ncc_a: maps.ncc_a,
        ncc_b: maps.ncc_b,
        ssim_a,
        ssim_b,
        accepted: ssim_a.min(ssim_b) >= cfg.qc_threshold,
    })
}

/// All time-ordered pairs `(i, j)` with `t_i < t_j` of one subject.
pub fn preprocess_subject(
    subject: &str,
    days: &[f64],
    scans: &[Volume3D],
    cfg: &PreprocessConfig,
) -> Result<Vec<PairRecord>> {
    if days.len() != scans.len() {
        return Err(Error::Shape(format!(
            "subject {subject}: {} scan times for {} volumes",
            days.len(),
            scans.len()
        )));
    }
    let mut jobs = Vec::new();
    for a in 0..scans.len() {
        for b in 0..scans.len() {
            if days[a] < days[b] {
                jobs.push((a, b));
            }
        }
    }
    jobs.par_iter()
        .map(|&(a, b)| preprocess_pair(subject, (a, days[a], &scans[a]), (b, days[b], &scans[b]), cfg))
        .collect()
}

/// Source of half-way resampled pairs for batch assembly.
pub trait PairSource {
    /// Slot 0 and slot 1 of `pair` in the half-way space of `pair.variant`.
    fn halfway(&self, pair: &ScanPair) -> Result<(Volume3D, Volume3D)>;

    /// Dims and spacing of the half-way volumes of `pair`.
    fn grid(&self, pair: &ScanPair) -> Result<([usize; 3], [f64; 3])>;
}

/// Raw scans kept in memory with the registration record of every pair;
/// resampling into half-way space happens on request.
#[derive(Clone, Debug, Default)]
pub struct PreprocessedStore {
    scans: BTreeMap<String, Vec<Volume3D>>,
    records: BTreeMap<(String, usize, usize), PairRecord>,
}

impl PreprocessedStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_scans(&mut self, subject: &str, scans: Vec<Volume3D>) {
        self.scans.insert(subject.to_string(), scans);
    }

    pub fn insert_record(&mut self, r: PairRecord) {
        self.records.insert((r.subject.clone(), r.i, r.j), r);
    }

    pub fn records(&self) -> impl Iterator<Item = &PairRecord> {
        self.records.values()
    }

    pub fn scans(&self, subject: &str) -> Option<&[Volume3D]> {
        self.scans.get(subject).map(|v| v.as_slice())
    }

    pub fn record_for(&self, pair: &ScanPair) -> Result<&PairRecord> {
        let (i, j) = pair.canonical_indices();
        self.records.get(&(pair.subject.clone(), i, j)).ok_or_else(|| {
            Error::MissingData(format!(
                "no preprocessed record for pair {}",
                pair_id(&pair.subject, i, j)
            ))
        })
    }

    /// Whether the pair exists and passed QC.
    pub fn is_accepted(&self, pair: &ScanPair) -> bool {
        self.record_for(pair).map(|r| r.accepted).unwrap_or(false)
    }

    pub fn qc_report(&self, threshold: f64) -> QcReport {
        qc_gate(self.records.values().map(|r| (r.id(), r.ssim())), threshold)
    }

    pub fn save_records(&self, path: &Path) -> Result<()> {
        let list: Vec<&PairRecord> = self.records.values().collect();
        let text = serde_json::to_string_pretty(&list)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_records(path: &Path) -> Result<Vec<PairRecord>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl PairSource for PreprocessedStore {
    fn grid(&self, pair: &ScanPair) -> Result<([usize; 3], [f64; 3])> {
        let v = self
            .scans
            .get(&pair.subject)
            .and_then(|s| s.get(pair.slot0.index))
            .ok_or_else(|| Error::MissingData(format!("no scan {} for subject {}", pair.slot0.index, pair.subject)))?;
        Ok((v.dims(), v.spacing()))
    }

    fn halfway(&self, pair: &ScanPair) -> Result<(Volume3D, Volume3D)> {
        let rec = self.record_for(pair)?;
        let scans = self
            .scans
            .get(&pair.subject)
            .ok_or_else(|| Error::MissingData(format!("no scans loaded for subject {}", pair.subject)))?;
        let get = |idx: usize| {
            scans
                .get(idx)
                .ok_or_else(|| Error::MissingData(format!("subject {} has no scan {idx}", pair.subject)))
        };
        let (v0, v1) = (get(pair.slot0.index)?, get(pair.slot1.index)?);
        let maps = rec.maps()?;
        let chronological = pair.slot0.index == rec.i;
        // In canonical order the variants map straight through; for the
        // reversed presentation, registering with slot 0 fixed is the
        // canonical variant B with its slots exchanged.
        let m = match (chronological, pair.variant) {
            (true, Variant::A) => maps.variant_a,
            (true, Variant::B) => maps.variant_b,
            (false, Variant::A) => swap(maps.variant_b),
            (false, Variant::B) => swap(maps.variant_a),
        };
        Ok(m.apply(v0, v1))
    }
}

fn swap(m: HalfwayMaps) -> HalfwayMaps {
    HalfwayMaps {
        slot0: m.slot1,
        slot1: m.slot0,
    }
}
