//! Retrains, rescores and re-evaluates at each RISI loss weight, sharing the
//! main run's synthesis and preprocessing.

use log::info;
use serde::{Deserialize, Serialize};

use super::eval::{Report, REPORT_FILE};
use crate::artifacts::{write, Run};
use crate::config::Stage;
use crate::error::Result;

pub const SWEEP_REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub w_risi: f64,
    /// Run directory relative to the main run.
    pub dir: String,
    pub sto_accuracy: f64,
    pub sto_auc: f64,
    pub risi_accuracy: f64,
    /// `(nominal interval, pooled mean PII)` per bin.
    pub bin_means: Vec<(f64, f64)>,
    pub spread: f64,
    pub r2: f64,
    pub strictly_increasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn entry(&self, w_risi: f64) -> Option<&SweepEntry> {
        self.entries.iter().find(|e| e.w_risi == w_risi)
    }
}

pub fn tag(w_risi: f64) -> String {
    format!("w_risi_{w_risi}")
}

/// Runs whichever of train, score and eval are missing or stale for each
/// weight. The weight of the main configuration reuses the main run.
pub fn run(base: &Run) -> Result<SweepReport> {
    base.require(Stage::Train, Stage::Preprocess)?;
    let mut entries = Vec::new();
    for &w in &base.cfg.sweep.risi_weights {
        let (run, dir) = if w == base.cfg.train.weights.w_risi {
            (Run::new(base.cfg.clone()), ".".to_string())
        } else {
            let mut cfg = base.cfg.clone();
            cfg.train.weights.w_risi = w;
            cfg.validate()?;
            (Run::variant(cfg, &tag(w)), format!("sweep/{}", tag(w)))
        };
        for stage in [Stage::Train, Stage::Score, Stage::Eval] {
            if run.is_current(stage) {
                info!("w_risi {w}: {} is up to date", stage.name());
            } else {
                info!("w_risi {w}: running {}", stage.name());
                crate::run_stage(&run, stage)?;
            }
        }
        let report: Report = run.read_json(Stage::Eval, &run.path(Stage::Eval, REPORT_FILE))?;
        entries.push(SweepEntry {
            w_risi: w,
            dir,
            sto_accuracy: report.sto.network.accuracy,
            sto_auc: report.sto.network.auc,
            risi_accuracy: report.risi.network.accuracy,
            bin_means: report
                .intervals
                .bins
                .iter()
                .map(|b| (b.nominal_days, b.mean_pii))
                .collect(),
            spread: report.intervals.spread,
            r2: report.intervals.r2,
            strictly_increasing: report.intervals.strictly_increasing,
        });
    }
    let out = SweepReport { entries };
    let dir = base.root.join("sweep");
    std::fs::create_dir_all(&dir).map_err(|e| crate::error::CliError::io(&dir, e))?;
    write(&dir.join(SWEEP_REPORT_FILE), serde_json::to_string_pretty(&out)? + "\n")?;
    Ok(out)
}
