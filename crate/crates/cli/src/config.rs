//! Experiment configuration: one TOML file, resolved once per run.

use std::fs;
use std::path::{Path, PathBuf};

use deepatrophy_core::store::PreprocessConfig;
use deepatrophy_core::synth::{four_cohort_preset, mix_seed, CohortLabel, CohortSpec, ConfoundLevels, PhantomConfig};
use deepatrophy_net::{EncoderConfig, TrainConfig};
use deepatrophy_stats::progression::Window;
use deepatrophy_stats::samplesize::TrialDesign;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Run directory; every stage writes below it.
    pub out: PathBuf,
    pub cohort: CohortConfig,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            cohort: CohortConfig::default(),
            split: SplitConfig::default(),
            preprocess: PreprocessConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    /// Subjects per cohort of the four-cohort preset.
    pub n_per_cohort: usize,
    pub phantom: PhantomConfig,
    /// Applied to every preset cohort.
    pub confounds: ConfoundLevels,
    /// Explicit cohorts; when non-empty they replace the preset.
    pub specs: Vec<CohortSpec>,
    /// Subjects scanned twice on one day, each contributing two structures.
    pub sameday_subjects: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_per_cohort: 50,
            phantom: PhantomConfig::default(),
            confounds: ConfoundLevels::default(),
            specs: Vec::new(),
            sameday_subjects: 9,
        }
    }
}

impl CohortConfig {
    pub fn resolved_specs(&self) -> Vec<CohortSpec> {
        if !self.specs.is_empty() {
            return self.specs.clone();
        }
        let mut specs = four_cohort_preset(self.n_per_cohort);
        for s in &mut specs {
            s.confounds = self.confounds.clone();
        }
        specs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    /// Per-cohort subject counts; override the fractions when set.
    pub train_count: Option<usize>,
    pub val_count: Option<usize>,
    /// Subjects with fewer scans go to the test set.
    pub min_scans_for_training: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.45,
            val: 0.05,
            train_count: None,
            val_count: None,
            min_scans_for_training: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Cohort whose training pairs fit the interval model.
    pub fit_cohort: CohortLabel,
    /// Enter every fitting pair in both slot orders instead of one random order.
    pub both_orders: bool,
    pub eval_chunk: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            fit_cohort: CohortLabel::Ctl,
            both_orders: false,
            eval_chunk: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Follow-up windows (days from baseline) for summary scores.
    pub windows: Vec<Window>,
    /// Nominal actual intervals (days) for the interval-bin analysis.
    pub interval_bins: Vec<f64>,
    /// A pair falls in a bin when its interval is within this fraction of it.
    pub bin_tolerance: f64,
    pub design: TrialDesign,
    pub bootstrap_replicates: usize,
    pub welch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            windows: vec![Window { lo: 180.0, hi: 400.0 }, Window { lo: 400.0, hi: 800.0 }],
            interval_bins: vec![90.0, 180.0, 365.0],
            bin_tolerance: 0.1,
            design: TrialDesign::default(),
            bootstrap_replicates: 1000,
            welch: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub risi_weights: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            risi_weights: vec![0.0, 0.1, 1.0, 10.0],
        }
    }
}

const SALT_TRAIN: u64 = 0x7EA1;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies command-line overrides, derives stage seeds and validates.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.train.seed = mix_seed(self.seed, SALT_TRAIN);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.cohort.resolved_specs() {
            s.validate()?;
        }
        let sp = &self.split;
        if !(sp.train >= 0.0 && sp.val >= 0.0 && sp.train + sp.val <= 1.0) {
            return Err(CliError::Config(format!(
                "split fractions {} + {} must lie in [0, 1]",
                sp.train, sp.val
            )));
        }
        if self.encoder.input_dims != self.train.augmentation.crop {
            return Err(CliError::Config(format!(
                "encoder input {:?} must equal the crop size {:?}",
                self.encoder.input_dims, self.train.augmentation.crop
            )));
        }
        let dims = self.cohort.phantom.dims;
        if (0..3).any(|a| self.train.augmentation.crop[a] > dims[a]) {
            return Err(CliError::Config(format!(
                "crop {:?} exceeds the volume {dims:?}",
                self.train.augmentation.crop
            )));
        }
        self.train.validate()?;
        self.eval.design.validate()?;
        if self.eval.windows.iter().any(|w| !(w.hi > w.lo)) {
            return Err(CliError::Config("every window needs hi > lo".into()));
        }
        if self.sweep.risi_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(CliError::Config("sweep weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Hash of everything that determines the outputs of `stage` and the
    /// stages before it. The run directory is excluded.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut parts: Vec<serde_json::Value> = vec![self.seed.into(), to_json(&self.cohort)];
        if stage >= Stage::Preprocess {
            parts.push(to_json(&self.preprocess));
            parts.push(to_json(&self.split));
        }
        if stage >= Stage::Train {
            parts.push(to_json(&self.encoder));
            parts.push(to_json(&self.train));
        }
        if stage >= Stage::Score {
            parts.push(to_json(&self.score));
        }
        if stage >= Stage::Eval {
            parts.push(to_json(&self.eval));
        }
        let bytes = serde_json::to_vec(&parts).expect("json");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serialises")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Preprocess,
    Train,
    Score,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Eval => "eval",
        }
    }
}
