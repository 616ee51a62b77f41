//! Experiment pipeline over synthetic longitudinal cohorts: synthesis,
//! symmetric preprocessing, network training, scoring and evaluation, each
//! a resumable stage with its own manifest.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod split;
pub mod stages;

pub use artifacts::{Run, StageManifest};
pub use config::{ExperimentConfig, Stage};
pub use error::{CliError, Result};

pub fn run_stage(run: &Run, stage: Stage) -> Result<StageManifest> {
    match stage {
        Stage::Synth => stages::synth::run(run),
        Stage::Preprocess => stages::preprocess::run(run),
        Stage::Train => stages::train::run(run),
        Stage::Score => stages::score::run(run),
        Stage::Eval => stages::eval::run(run),
    }
}

pub const ALL_STAGES: [Stage; 5] = [Stage::Synth, Stage::Preprocess, Stage::Train, Stage::Score, Stage::Eval];

/// Runs every stage in order. With `resume`, stages whose outputs are
/// already current are skipped.
pub fn run_all(run: &Run, resume: bool) -> Result<()> {
    for stage in ALL_STAGES {
        if resume && run.is_current(stage) {
            log::info!("{} is up to date", stage.name());
            continue;
        }
        log::info!("running {}", stage.name());
        run_stage(run, stage)?;
    }
    Ok(())
}
