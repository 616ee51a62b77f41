//! Synthetic longitudinal cohorts: ellipsoidal phantoms that shrink at a known
//! per-subject rate, observed through time-independent nuisance factors
//! (bias field, noise, head jitter).

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::save_volume;
use crate::registration::resample_rigid_onto;
use crate::rigid::RigidTransform;
use crate::volume::Volume3D;

pub const DAYS_PER_YEAR: f64 = 365.25;
/// Structures never shrink below this fraction of their baseline volume.
pub const MIN_VOLUME_FRACTION: f64 = 0.5;

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derived_rng(seed: u64, salts: &[u64]) -> ChaCha8Rng {
    let s = salts.iter().fold(seed, |acc, &x| mix_seed(acc, x));
    ChaCha8Rng::seed_from_u64(s)
}

const SALT_ANATOMY: u64 = 0xA7A7;
const SALT_CONFOUND: u64 = 0xC0F0;
const SALT_SUBJECT: u64 = 0x5B1E;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CohortLabel {
    #[serde(rename = "CTL")]
    Ctl,
    #[serde(rename = "PRE")]
    Pre,
    #[serde(rename = "EMCI")]
    Emci,
    #[serde(rename = "LMCI")]
    Lmci,
}

impl CohortLabel {
    pub const ALL: [CohortLabel; 4] = [CohortLabel::Ctl, CohortLabel::Pre, CohortLabel::Emci, CohortLabel::Lmci];

    pub fn as_str(&self) -> &'static str {
        match self {
            CohortLabel::Ctl => "CTL",
            CohortLabel::Pre => "PRE",
            CohortLabel::Emci => "EMCI",
            CohortLabel::Lmci => "LMCI",
        }
    }
}

impl fmt::Display for CohortLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CohortLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CTL" => Ok(CohortLabel::Ctl),
            "PRE" => Ok(CohortLabel::Pre),
            "EMCI" => Ok(CohortLabel::Emci),
            "LMCI" => Ok(CohortLabel::Lmci),
            other => Err(Error::Config(format!("unknown cohort label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Default semi-axes as a fraction of the physical grid extent.
    pub semi_axis_fraction: f64,
    /// Per-subject semi-axes vary uniformly within this relative band.
    pub semi_axis_variation: f64,
    pub structure_intensity: f64,
    pub background_level: f64,
    pub texture_amplitude: f64,
    /// Width of the soft boundary ramp in voxels.
    pub boundary_voxels: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 40, 32],
            spacing: [1.0, 1.0, 1.0],
            semi_axis_fraction: 0.25,
            semi_axis_variation: 0.15,
            structure_intensity: 1.0,
            background_level: 0.3,
            texture_amplitude: 0.06,
            boundary_voxels: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TextureWave {
    k: [f64; 3],
    phase: f64,
    amp: f64,
}

/// Static anatomy of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub cfg: PhantomConfig,
    pub semi_axes: [f64; 3],
    pub center: [f64; 3],
    waves: Vec<TextureWave>,
}

/// Radius of the ramp centre (in normalised-radius units) that makes the soft
/// mask integrate to exactly the ellipsoid volume: `r^3 + r h^2 = 1`.
fn corrected_level(h: f64) -> f64 {
    let mut r = 1.0;
    for _ in 0..50 {
        let f = r * r * r + r * h * h - 1.0;
        let df = 3.0 * r * r + h * h;
        r -= f / df;
    }
    r
}

impl Phantom {
    pub fn analytic_volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.semi_axes.iter().product::<f64>()
    }

    fn background(&self, p: &Vector3<f64>) -> f64 {
        let mut v = self.cfg.background_level;
        for w in &self.waves {
            v += w.amp * (w.k[0] * p.x + w.k[1] * p.y + w.k[2] * p.z + w.phase).cos();
        }
        v
    }

    /// Soft structure mask and image with semi-axes scaled by `s`.
    pub fn render(&self, s: f64) -> (Volume3D, Volume3D) {
        self.render_on(self.cfg.dims, s)
    }

    /// As `render`, on a centred grid of `dims` voxels at the phantom spacing.
    pub fn render_on(&self, dims: [usize; 3], s: f64) -> (Volume3D, Volume3D) {
        let cfg = &self.cfg;
        let ax = [self.semi_axes[0] * s, self.semi_axes[1] * s, self.semi_axes[2] * s];
        let mean_axis = (ax[0] * ax[1] * ax[2]).cbrt();
        let mean_spacing = cfg.spacing.iter().product::<f64>().cbrt();
        let h = 0.5 * cfg.boundary_voxels * mean_spacing / mean_axis;
        let r0 = corrected_level(h);
        let c = Vector3::from(self.center);
        let template = Volume3D::zeros(dims, cfg.spacing).expect("validated dims");
        let [nx, ny, nz] = dims;
        let mut img = Vec::with_capacity(template.len());
        let mut mask = Vec::with_capacity(template.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let p = template.voxel_to_physical(i as f64, j as f64, k as f64);
                    let d = p - c;
                    let rho = ((d.x / ax[0]).powi(2) + (d.y / ax[1]).powi(2) + (d.z / ax[2]).powi(2)).sqrt();
                    let m = (0.5 - (rho - r0) / (2.0 * h)).clamp(0.0, 1.0);
                    let v = self.background(&p) * (1.0 - m) + cfg.structure_intensity * m;
                    img.push(v as f32);
                    mask.push(m as f32);
                }
            }
        }
        (template.with_data(img), template.with_data(mask))
    }
}

/// Builds the subject's anatomy from the anatomy stream seeded by `id_seed`.
pub fn make_phantom(id_seed: u64, cfg: &PhantomConfig) -> Result<(Phantom, Volume3D, Volume3D)> {
    if cfg.dims.iter().any(|&d| d < 16) {
        return Err(Error::Config(format!(
            "phantom dims must be >= 16 per axis, got {:?}",
            cfg.dims
        )));
    }
    if cfg.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("phantom spacing must be positive".into()));
    }
    let mut rng = derived_rng(id_seed, &[SALT_ANATOMY]);
    let extent: Vec<f64> = (0..3).map(|a| (cfg.dims[a] as f64 - 1.0) * cfg.spacing[a]).collect();
    let mut semi_axes = [0.0; 3];
    for a in 0..3 {
        let base = cfg.semi_axis_fraction * extent[a];
        semi_axes[a] = base * (1.0 + rng.random_range(-cfg.semi_axis_variation..=cfg.semi_axis_variation));
    }
    let mean_spacing = cfg.spacing.iter().product::<f64>().cbrt();
    for a in 0..3 {
        let largest = cfg.semi_axis_fraction * extent[a] * (1.0 + cfg.semi_axis_variation);
        let reach = largest + cfg.boundary_voxels * mean_spacing;
        if reach > 0.5 * extent[a] - cfg.spacing[a] {
            return Err(Error::Config(format!(
                "structure (semi-axis up to {largest:.2} mm on axis {a}) would exceed the grid"
            )));
        }
    }
    let n_waves = 6;
    let mut waves = Vec::with_capacity(n_waves);
    for _ in 0..n_waves {
        let wavelength = rng.random_range(6.0..14.0);
        let dir: Vector3<f64> = Vector3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        )
        .normalize();
        let k = dir * (2.0 * PI / wavelength);
        waves.push(TextureWave {
            k: [k.x, k.y, k.z],
            phase: rng.random_range(0.0..2.0 * PI),
            amp: cfg.texture_amplitude / (n_waves as f64).sqrt(),
        });
    }
    let phantom = Phantom {
        cfg: cfg.clone(),
        semi_axes,
        center: [0.0; 3],
        waves,
    };
    let (img, mask) = phantom.render(1.0);
    Ok((phantom, img, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct ConfoundLevels {
    pub jitter_translation_mm: f64,
    pub jitter_rotation_deg: f64,
    pub noise_sd: f64,
    pub bias_amplitude: f64,
    /// Probability that a scan is acquired with `corrupt_noise_sd` noise instead.
    pub corrupt_probability: f64,
    pub corrupt_noise_sd: f64,
}

impl Default for ConfoundLevels {
    fn default() -> Self {
        Self {
            jitter_translation_mm: 1.0,
            jitter_rotation_deg: 1.0,
            noise_sd: 0.01,
            bias_amplitude: 0.05,
            corrupt_probability: 0.0,
            corrupt_noise_sd: 0.7,
        }
    }
}

impl ConfoundLevels {
    pub fn none() -> Self {
        Self {
            jitter_translation_mm: 0.0,
            jitter_rotation_deg: 0.0,
            noise_sd: 0.0,
            bias_amplitude: 0.0,
            corrupt_probability: 0.0,
            corrupt_noise_sd: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub label: CohortLabel,
    pub n_subjects: usize,
    /// Mean fractional volume loss per year (positive = shrinkage).
    pub atrophy_rate_mean: f64,
    pub atrophy_rate_sd: f64,
    /// Candidate scan days; each subject gets a subset.
    pub schedule: Vec<f64>,
    /// Days every subject is scanned on (must be in `schedule`).
    #[serde(default = "default_anchor_days")]
    pub anchor_days: Vec<f64>,
    pub scans_min: usize,
    pub scans_max: usize,
    #[serde(default)]
    pub confounds: ConfoundLevels,
    #[serde(default)]
    pub adversarial_drift: bool,
}

fn default_anchor_days() -> Vec<f64> {
    vec![0.0]
}

pub const DEFAULT_SCHEDULE: [f64; 8] = [0.0, 90.0, 180.0, 365.0, 545.0, 730.0, 1095.0, 1461.0];

/// Change in rate per year of age above 75; ties rate to age mildly.
pub const RATE_AGE_SLOPE: f64 = 0.0001;

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.atrophy_rate_mean >= 0.0) || !(self.atrophy_rate_sd >= 0.0) {
            return Err(Error::Config(format!(
                "{}: atrophy rate mean/sd must be >= 0",
                self.label
            )));
        }
        let mut sorted = self.schedule.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "{}: schedule times must be distinct",
                self.label
            )));
        }
        if !self.schedule.contains(&0.0) {
            return Err(Error::Config(format!("{}: schedule must include day 0", self.label)));
        }
        if self.anchor_days.iter().any(|d| !self.schedule.contains(d)) {
            return Err(Error::Config(format!(
                "{}: anchor days must be in the schedule",
                self.label
            )));
        }
        if self.scans_min < 1 || self.scans_min > self.scans_max || self.scans_max > self.schedule.len() {
            return Err(Error::Config(format!(
                "{}: need 1 <= scans_min <= scans_max <= schedule length",
                self.label
            )));
        }
        Ok(())
    }
}

/// Four cohorts with synthetic rates CTL 0.8%, PRE 1.2%, EMCI 2%, LMCI 3% per year.
pub fn four_cohort_preset(n_per_cohort: usize) -> Vec<CohortSpec> {
    let rates = [
        (CohortLabel::Ctl, 0.008, 0.0015),
        (CohortLabel::Pre, 0.012, 0.002),
        (CohortLabel::Emci, 0.02, 0.003),
        (CohortLabel::Lmci, 0.03, 0.004),
    ];
    rates
        .iter()
        .map(|&(label, mean, sd)| CohortSpec {
            label,
            n_subjects: n_per_cohort,
            atrophy_rate_mean: mean,
            atrophy_rate_sd: sd,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            anchor_days: vec![0.0, 365.0],
            scans_min: 4,
            scans_max: 5,
            confounds: ConfoundLevels::default(),
            adversarial_drift: false,
        })
        .collect()
}

/// Nuisance factors drawn for one scan, independently of its time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfoundDraw {
    pub jitter: [f64; 6],
    pub bias_coeffs: [f64; 9],
    pub noise_sd: f64,
    pub noise_seed: u64,
    pub corrupted: bool,
}

impl ConfoundDraw {
    pub fn draw<R: Rng + ?Sized>(levels: &ConfoundLevels, rng: &mut R) -> Self {
        let mut n = || -> f64 { StandardNormal.sample(rng) };
        let mut jitter = [0.0; 6];
        for v in jitter.iter_mut().take(3) {
            *v = n() * levels.jitter_translation_mm;
        }
        for v in jitter.iter_mut().skip(3) {
            *v = n() * levels.jitter_rotation_deg.to_radians();
        }
        let mut bias_coeffs = [0.0; 9];
        for c in bias_coeffs.iter_mut() {
            *c = n() * levels.bias_amplitude / 3.0;
        }
        let corrupted = levels.corrupt_probability > 0.0 && rng.random::<f64>() < levels.corrupt_probability;
        Self {
            jitter,
            bias_coeffs,
            noise_sd: if corrupted {
                levels.corrupt_noise_sd
            } else {
                levels.noise_sd
            },
            noise_seed: rng.random(),
            corrupted,
        }
    }

    pub fn jitter_transform(&self) -> RigidTransform {
        RigidTransform::from_params(&self.jitter)
    }

    pub fn jitter_magnitude(&self) -> f64 {
        self.jitter.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn bias_magnitude(&self) -> f64 {
        self.bias_coeffs.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub cohort: CohortLabel,
    pub rate: f64,
    pub age: f64,
    pub anatomy_seed: u64,
    pub scan_days: Vec<f64>,
    pub true_volumes: Vec<f64>,
    pub confounds: Vec<ConfoundDraw>,
    pub adversarial_drift: bool,
    pub clamped: Vec<bool>,
}

/// Structure volume after `t_days` at annual loss `rate`, clamped at half.
pub fn true_volume(v0: f64, rate: f64, t_days: f64) -> (f64, bool) {
    let f = 1.0 - rate * t_days / DAYS_PER_YEAR;
    if f < MIN_VOLUME_FRACTION {
        (v0 * MIN_VOLUME_FRACTION, true)
    } else {
        (v0 * f, false)
    }
}

/// Gamma exponent of the time-dependent contrast drift.
pub const DRIFT_PER_YEAR: f64 = 0.05;

/// Renders one acquisition: atrophy, then bias field, noise and jitter; the
/// optional drift is the only step that depends on `t_days`.
pub fn simulate_timepoint(
    phantom: &Phantom,
    rate: f64,
    t_days: f64,
    draw: &ConfoundDraw,
    drift: bool,
) -> (Volume3D, bool) {
    let (_, clamped) = true_volume(1.0, rate, t_days);
    let frac = (1.0 - rate * t_days / DAYS_PER_YEAR).max(MIN_VOLUME_FRACTION);
    let dims = phantom.cfg.dims;
    let jittered = draw.jitter.iter().any(|&v| v != 0.0);
    // Jitter resamples from a padded canvas so the moved image has no
    // zero-filled border that registration could lock onto.
    let canvas = if jittered {
        dims.map(|d| d + 2 * JITTER_PAD)
    } else {
        dims
    };
    let (mut img, _) = phantom.render_on(canvas, frac.cbrt());
    if draw.bias_coeffs.iter().any(|&c| c != 0.0) {
        let half: Vec<f64> = (0..3)
            .map(|a| 0.5 * (dims[a] as f64 - 1.0) * phantom.cfg.spacing[a])
            .collect();
        let b = draw.bias_coeffs;
        let [nx, ny, nz] = img.dims();
        let mut data = img.data().to_vec();
        let mut idx = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let p = img.voxel_to_physical(i as f64, j as f64, k as f64);
                    let (x, y, z) = (p.x / half[0], p.y / half[1], p.z / half[2]);
                    let e = b[0] * x
                        + b[1] * y
                        + b[2] * z
                        + b[3] * x * x
                        + b[4] * y * y
                        + b[5] * z * z
                        + b[6] * x * y
                        + b[7] * y * z
                        + b[8] * x * z;
                    data[idx] = (data[idx] as f64 * e.exp()) as f32;
                    idx += 1;
                }
            }
        }
        img = img.with_data(data);
    }
    if draw.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw.noise_seed);
        let normal = Normal::new(0.0, draw.noise_sd).expect("noise sd is finite");
        let data = img.data().iter().map(|&v| v + normal.sample(&mut rng) as f32).collect();
        img = img.with_data(data);
    }
    if jittered {
        img = resample_rigid_onto(&img, &draw.jitter_transform(), dims);
    }
    if drift {
        let gamma = 1.0 + DRIFT_PER_YEAR * t_days / DAYS_PER_YEAR;
        let data = img
            .data()
            .iter()
            .map(|&v| (v.signum() as f64 * (v.abs() as f64).powf(gamma)) as f32)
            .collect();
        img = img.with_data(data);
    }
    (img, clamped)
}

/// Voxels of padding around the canvas used for jittered acquisitions.
pub const JITTER_PAD: usize = 8;

/// A generated subject with its scans in time order.
#[derive(Clone, Debug)]
pub struct SubjectData {
    pub record: SubjectRecord,
    pub phantom: Phantom,
    pub scans: Vec<Volume3D>,
}

/// The subject's record (age, rate, schedule, confound draws) without
/// rendering any scans; volumes and clamp flags are left empty.
pub fn draw_subject(spec: &CohortSpec, idx: usize, master_seed: u64) -> SubjectRecord {
    let label_salt = spec.label as u64 + 1;
    let mut rng = derived_rng(master_seed, &[SALT_SUBJECT, label_salt, idx as u64]);
    let age = rng.random_range(65.0..85.0);
    let z: f64 = StandardNormal.sample(&mut rng);
    let rate = (spec.atrophy_rate_mean + spec.atrophy_rate_sd * z + RATE_AGE_SLOPE * (age - 75.0)).max(0.0);
    let anatomy_seed: u64 = rng.random();
    let n_scans = rng.random_range(spec.scans_min..=spec.scans_max);
    let mut days: Vec<f64> = spec.anchor_days.clone();
    let mut pool: Vec<f64> = spec.schedule.iter().copied().filter(|d| !days.contains(d)).collect();
    if !days.contains(&0.0) {
        days.push(0.0);
        pool.retain(|&d| d != 0.0);
    }
    pool.shuffle(&mut rng);
    while days.len() < n_scans && !pool.is_empty() {
        days.push(pool.pop().unwrap());
    }
    days.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut confound_rng = derived_rng(anatomy_seed, &[SALT_CONFOUND]);
    let confounds = days
        .iter()
        .map(|_| ConfoundDraw::draw(&spec.confounds, &mut confound_rng))
        .collect();
    SubjectRecord {
        id: format!("{}-{:03}", spec.label, idx),
        cohort: spec.label,
        rate,
        age,
        anatomy_seed,
        scan_days: days,
        true_volumes: Vec::new(),
        confounds,
        adversarial_drift: spec.adversarial_drift,
        clamped: Vec::new(),
    }
}

pub fn generate_subject(
    spec: &CohortSpec,
    idx: usize,
    master_seed: u64,
    phantom_cfg: &PhantomConfig,
) -> Result<SubjectData> {
    let mut record = draw_subject(spec, idx, master_seed);
    let (phantom, _, _) = make_phantom(record.anatomy_seed, phantom_cfg)?;
    let v0 = phantom.analytic_volume();
    let mut scans = Vec::with_capacity(record.scan_days.len());
    for (t, draw) in record.scan_days.iter().zip(&record.confounds) {
        let (img, clamped) = simulate_timepoint(&phantom, record.rate, *t, draw, record.adversarial_drift);
        record.true_volumes.push(true_volume(v0, record.rate, *t).0);
        record.clamped.push(clamped);
        scans.push(img);
    }
    Ok(SubjectData { record, phantom, scans })
}

/// Generates all subjects in memory (parallel over subjects, deterministic).
pub fn generate_subjects(
    specs: &[CohortSpec],
    master_seed: u64,
    phantom_cfg: &PhantomConfig,
) -> Result<Vec<SubjectData>> {
    for s in specs {
        s.validate()?;
    }
    let jobs: Vec<(&CohortSpec, usize)> = specs
        .iter()
        .flat_map(|s| (0..s.n_subjects).map(move |i| (s, i)))
        .collect();
    jobs.par_iter()
        .map(|(spec, i)| generate_subject(spec, *i, master_seed, phantom_cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestScan {
    pub path: String,
    pub t_days: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    pub cohort: CohortLabel,
    pub age: f64,
    pub scans: Vec<ManifestScan>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Training-facing dataset description; carries no ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<ManifestSubject>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthRow {
    pub subject_id: String,
    pub t_days: f64,
    pub true_volume_mm3: f64,
    pub true_rate: f64,
}

pub fn truth_csv(records: &[&SubjectRecord]) -> String {
    let mut s = String::from("subject_id,t_days,true_volume_mm3,true_rate\n");
    for r in records {
        for (t, v) in r.scan_days.iter().zip(&r.true_volumes) {
            s.push_str(&format!("{},{},{:.6},{:.8}\n", r.id, t, v, r.rate));
        }
    }
    s
}

pub fn parse_truth_csv(text: &str) -> Result<Vec<TruthRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("truth file line {}: bad number {s:?}", n + 1)))
        };
        if f.len() != 4 {
            return Err(Error::Config(format!("truth file line {}: expected 4 fields", n + 1)));
        }
        rows.push(TruthRow {
            subject_id: f[0].to_string(),
            t_days: num(f[1])?,
            true_volume_mm3: num(f[2])?,
            true_rate: num(f[3])?,
        });
    }
    Ok(rows)
}

/// Paths of a generated dataset on disk.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub truth: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth.csv";

/// Writes every scan as DAVOL1 under `root/volumes`, the manifest, and the
/// separate truth file. Output is a deterministic function of the inputs.
pub fn generate_cohort(
    specs: &[CohortSpec],
    master_seed: u64,
    phantom_cfg: &PhantomConfig,
    root: &Path,
) -> Result<(DatasetPaths, Vec<SubjectData>)> {
    let subjects = generate_subjects(specs, master_seed, phantom_cfg)?;
    let vol_dir = root.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut manifest = Manifest::default();
    for s in &subjects {
        let mut scans = Vec::new();
        let mut warnings = Vec::new();
        for (i, (t, vol)) in s.record.scan_days.iter().zip(&s.scans).enumerate() {
            let rel = format!("volumes/{}_t{:04}.davol", s.record.id, *t as i64);
            save_volume(vol, root.join(&rel))?;
            scans.push(ManifestScan { path: rel, t_days: *t });
            if s.record.clamped[i] {
                warnings.push(format!("volume clamp reached at day {t}"));
            }
        }
        manifest.subjects.push(ManifestSubject {
            id: s.record.id.clone(),
            cohort: s.record.cohort,
            age: s.record.age,
            scans,
            warnings,
        });
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    let truth_path = root.join(TRUTH_FILE);
    let records: Vec<&SubjectRecord> = subjects.iter().map(|s| &s.record).collect();
    fs::write(&truth_path, truth_csv(&records)).map_err(|e| Error::io(&truth_path, e))?;
    Ok((
        DatasetPaths {
            root: root.to_path_buf(),
            manifest: manifest_path,
            truth: truth_path,
        },
        subjects,
    ))
}

/// Intensity-threshold soft segmentation used by the volumetric baseline:
/// 0 below `lo`, 1 above `hi`, linear between.
pub fn segment_structure(vol: &Volume3D, lo: f32, hi: f32) -> Volume3D {
    let inv = 1.0 / (hi - lo);
    vol.with_data(vol.data().iter().map(|&v| ((v - lo) * inv).clamp(0.0, 1.0)).collect())
}

/// Integral of a soft mask in mm³.
pub fn mask_volume(mask: &Volume3D) -> f64 {
    mask.sum() * mask.voxel_volume()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrected_level_solves_cubic() {
        let h = 0.13;
        let r = corrected_level(h);
        assert!((r * r * r + r * h * h - 1.0).abs() < 1e-14);
        assert_eq!(corrected_level(0.0), 1.0);
    }

    #[test]
    fn phantom_mask_matches_ellipsoid_volume() {
        let cfg = PhantomConfig::default();
        let (ph, _, mask) = make_phantom(42, &cfg).unwrap();
        let measured = mask_volume(&mask);
        let analytic = ph.analytic_volume();
        assert!((measured / analytic - 1.0).abs() < 0.02, "{measured} vs {analytic}");
    }

    #[test]
    fn phantom_is_deterministic_and_seed_dependent() {
        let cfg = PhantomConfig::default();
        let (a, ia, _) = make_phantom(1, &cfg).unwrap();
        let (b, ib, _) = make_phantom(1, &cfg).unwrap();
        assert_eq!(ia, ib);
        assert_eq!(a, b);
        let (c, _, _) = make_phantom(2, &cfg).unwrap();
        assert_ne!(a.semi_axes, c.semi_axes);
    }

    #[test]
    fn small_grid_and_oversized_structure() {
        let mut cfg = PhantomConfig {
            dims: [16, 16, 16],
            ..Default::default()
        };
        assert!(make_phantom(3, &cfg).is_ok());
        cfg.dims = [15, 16, 16];
        assert!(matches!(make_phantom(3, &cfg), Err(Error::Config(_))));
        cfg.dims = [16, 16, 16];
        cfg.semi_axis_fraction = 0.45;
        assert!(matches!(make_phantom(3, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn no_atrophy_no_confounds_reproduces_baseline() {
        let cfg = PhantomConfig::default();
        let (ph, base, _) = make_phantom(5, &cfg).unwrap();
        let draw = ConfoundDraw::draw(&ConfoundLevels::none(), &mut ChaCha8Rng::seed_from_u64(0));
        let (img, clamped) = simulate_timepoint(&ph, 0.0, 730.0, &draw, false);
        assert_eq!(img, base);
        assert!(!clamped);
    }

    #[test]
    fn contraction_hits_target_volume() {
        let cfg = PhantomConfig::default();
        let (ph, _, m0) = make_phantom(6, &cfg).unwrap();
        let (_, m1) = ph.render((1.0f64 - 0.04).cbrt());
        let ratio = mask_volume(&m1) / mask_volume(&m0);
        assert!((ratio - 0.96).abs() < 0.01 * 0.96, "ratio {ratio}");
        let (v, c) = true_volume(100.0, 0.04, DAYS_PER_YEAR);
        assert!((v - 96.0).abs() < 1e-9 && !c);
        assert_eq!(true_volume(100.0, 0.3, 2.0 * DAYS_PER_YEAR), (50.0, true));
    }

    #[test]
    fn spec_validation() {
        let mut s = four_cohort_preset(2).remove(0);
        assert!(s.validate().is_ok());
        s.schedule = vec![10.0, 20.0];
        s.anchor_days = vec![];
        assert!(s.validate().is_err());
        s.schedule = vec![0.0, 20.0, 20.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn preset_rates_are_ordered() {
        let p = four_cohort_preset(1);
        assert!(p.windows(2).all(|w| w[0].atrophy_rate_mean < w[1].atrophy_rate_mean));
    }

    #[test]
    fn truth_csv_round_trip() {
        let spec = &four_cohort_preset(1)[0];
        let mut small = PhantomConfig::default();
        small.dims = [16, 16, 16];
        let s = generate_subject(spec, 0, 9, &small).unwrap();
        let text = truth_csv(&[&s.record]);
        let rows = parse_truth_csv(&text).unwrap();
        assert_eq!(rows.len(), s.record.scan_days.len());
        assert_eq!(rows[0].subject_id, "CTL-000");
        assert!(rows.windows(2).all(|w| w[1].true_volume_mm3 < w[0].true_volume_mm3));
    }
}
