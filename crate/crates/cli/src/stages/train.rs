//! Network training on the training subjects' nested quads, with model
//! selection on the validation subjects.

use std::time::Instant;

use deepatrophy_core::sampler::{
    enumerate_nested_quads, enumerate_pairs, pairs_to_csv, quads_to_csv, scan_refs, NestedQuad, ScanPair,
};
use deepatrophy_core::synth::{derived_rng, MANIFEST_FILE};
use deepatrophy_net::{history_csv, save_checkpoint, train, ValidationSet};
use log::info;

use super::{
    build_store, days, load_manifest, load_records, load_split, subjects_in, BEST_CKPT, LAST_CKPT, PAIRS_FILE,
};
use crate::artifacts::{write, Run, StageManifest};
use crate::config::Stage;
use crate::error::{CliError, Result};
use crate::split::Split;

const SALT_QUADS: u64 = 0x9AD5;
pub const HISTORY_FILE: &str = "history.csv";
pub const QUADS_FILE: &str = "quads.csv";
pub const VAL_PAIRS_FILE: &str = "val_pairs.csv";

pub fn run(run: &Run) -> Result<StageManifest> {
    let started = Instant::now();
    let stage = Stage::Train;
    run.require(stage, Stage::Synth)?;
    run.require(stage, Stage::Preprocess)?;
    run.invalidate(stage)?;
    let dir = run.prepare(stage)?;
    let cfg = &run.cfg;

    let manifest = load_manifest(run, stage, MANIFEST_FILE)?;
    let split = load_split(run, stage)?;
    let records = load_records(run, stage, PAIRS_FILE)?;
    let used = manifest
        .subjects
        .iter()
        .filter(|s| matches!(split.get(&s.id), Some(Split::Train | Split::Val)));
    let store = build_store(run, stage, used, records)?;

    let mut rng = derived_rng(cfg.train.seed, &[SALT_QUADS]);
    let usable = |q: &NestedQuad| store.is_accepted(&q.pair1) && store.is_accepted(&q.pair2);
    let mut quads: Vec<Vec<NestedQuad>> = Vec::new();
    for s in subjects_in(&manifest, &split, Split::Train) {
        let mut qs = enumerate_nested_quads(&s.id, &scan_refs(&days(s)), &mut rng)?;
        qs.retain(usable);
        quads.push(qs);
    }
    let mut val_pairs: Vec<ScanPair> = Vec::new();
    let mut val_quads: Vec<NestedQuad> = Vec::new();
    for s in subjects_in(&manifest, &split, Split::Val) {
        let refs = scan_refs(&days(s));
        val_pairs.extend(
            enumerate_pairs(&s.id, &refs, &mut rng)?
                .into_iter()
                .filter(|p| store.is_accepted(p)),
        );
        val_quads.extend(
            enumerate_nested_quads(&s.id, &refs, &mut rng)?
                .into_iter()
                .filter(usable),
        );
    }
    let n_quads: usize = quads.iter().map(Vec::len).sum();
    if n_quads == 0 {
        return Err(CliError::Data(
            "no QC-accepted nested quads among the training subjects".into(),
        ));
    }
    info!(
        "training on {} subjects ({n_quads} quads); validating on {} pairs and {} quads",
        quads.len(),
        val_pairs.len(),
        val_quads.len()
    );
    let val = ValidationSet::build(&store, &val_pairs, &val_quads, cfg.train.augmentation.crop)?;
    let t0 = Instant::now();
    let outcome = train(&cfg.encoder, &cfg.train, &store, &quads, &val, &mut |r| {
        info!(
            "epoch {:>3}  loss {:.4}  val STO {:.3}  val RISI {:.3}  ({:.0} s)",
            r.epoch,
            r.train_loss,
            r.val_sto_acc,
            r.val_risi_acc,
            t0.elapsed().as_secs_f64()
        );
    })?;
    info!("selected epoch {}", outcome.best_epoch);
    save_checkpoint(
        &dir.join(BEST_CKPT),
        &outcome.best,
        outcome.best_epoch,
        &outcome.best_metrics(),
    )?;
    let last = outcome.history.last().expect("at least one epoch");
    let last_metrics = [
        ("train_loss".to_string(), last.train_loss),
        ("val_sto_acc".to_string(), last.val_sto_acc),
        ("val_risi_acc".to_string(), last.val_risi_acc),
    ]
    .into_iter()
    .collect();
    save_checkpoint(&dir.join(LAST_CKPT), &outcome.last, last.epoch, &last_metrics)?;
    write(&dir.join(HISTORY_FILE), history_csv(&outcome.history))?;
    let all: Vec<NestedQuad> = quads.into_iter().flatten().collect();
    write(&dir.join(QUADS_FILE), quads_to_csv(&all))?;
    write(&dir.join(VAL_PAIRS_FILE), pairs_to_csv(&val_pairs))?;
    run.finish(
        stage,
        &[BEST_CKPT, LAST_CKPT, HISTORY_FILE, QUADS_FILE, VAL_PAIRS_FILE],
        started,
    )
}
