//! Momentum SGD over batches of nested quads with best-validation model
//! selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use deepatrophy_core::batch::{assemble_training_batch, eval_input, pack_pair, AugmentationConfig, TrainingBatch};
use deepatrophy_core::sampler::{NestedQuad, ScanPair, Variant};
use deepatrophy_core::store::PairSource;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EncoderConfig, N_CATEGORIES};
use crate::error::{NetError, Result};
use crate::loss::LossWeights;
use crate::model::{Model, QuadTargets};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Quads per batch.
    pub batch: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// At most this many quads per subject per epoch, drawn afresh each
    /// epoch; `None` uses every quad.
    pub quads_per_subject: Option<usize>,
    pub augmentation: AugmentationConfig,
    /// Samples per evaluation forward pass.
    pub eval_chunk: usize,
    /// Training batches whose batch-norm statistics, averaged under the
    /// current weights, replace the running statistics before every
    /// validation pass. Zero keeps the moving averages.
    pub bn_recalibration_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            batch: 15,
            epochs: 15,
            weights: LossWeights::default(),
            seed: 0,
            quads_per_subject: None,
            augmentation: AugmentationConfig::default(),
            eval_chunk: 32,
            bn_recalibration_batches: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(NetError::Config(format!(
                "need lr > 0 and momentum in [0, 1), got {} / {}",
                self.lr, self.momentum
            )));
        }
        if self.batch == 0 || self.epochs == 0 || self.quads_per_subject == Some(0) {
            return Err(NetError::Config(
                "batch, epochs and quads_per_subject must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Momentum SGD: `v = mu v + g`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(n: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![T::zero(); n],
        }
    }

    pub fn apply(&mut self, params: &mut [T], grad: &[T]) {
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = mu * *v + g;
            *p = *p - lr * *v;
        }
    }
}

/// A model with its optimiser state.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: Sgd<T>,
    pub weights: LossWeights,
    pub steps: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, lr: f64, momentum: f64, weights: LossWeights) -> Self {
        let opt = Sgd::new(model.n_params(), lr, momentum);
        Self {
            model,
            opt,
            weights,
            steps: 0,
        }
    }

    /// One optimiser step on a batch; returns the training-mode loss before
    /// the update. A non-finite loss leaves the model untouched.
    pub fn step(&mut self, data: &[T], targets: QuadTargets) -> Result<f64> {
        let lg = self.model.loss_and_grad(data, targets, &self.weights)?;
        if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
            return Err(NetError::Numerical(format!(
                "non-finite loss {} at step {}",
                lg.loss, self.steps
            )));
        }
        self.opt.apply(&mut self.model.params, &lg.grad);
        self.model.update_running(&lg.stats);
        self.steps += 1;
        Ok(lg.loss)
    }

    pub fn step_batch(&mut self, batch: &TrainingBatch) -> Result<f64> {
        let data: Vec<T> = batch.data.iter().map(|&v| T::of(v as f64)).collect();
        self.step(
            &data,
            QuadTargets {
                sto_labels: &batch.sto_labels,
                categories: &batch.categories,
            },
        )
    }
}

/// Centred, variant-A evaluation inputs for validation pairs and quads,
/// rendered once.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub pairs: Vec<ScanPair>,
    pub pair_data: Vec<f32>,
    pub quads: Vec<NestedQuad>,
    /// Rows alternate pair1, pair2 of each quad.
    pub quad_data: Vec<f32>,
}

impl ValidationSet {
    pub fn build<S: PairSource + Sync + ?Sized>(
        store: &S,
        pairs: &[ScanPair],
        quads: &[NestedQuad],
        crop: [usize; 3],
    ) -> Result<Self> {
        let render = |p: &ScanPair, out: &mut Vec<f32>| -> Result<()> {
            let mut p = p.clone();
            p.variant = Variant::A;
            let (v0, v1) = eval_input(store, &p, crop)?;
            pack_pair(&v0, &v1, out);
            Ok(())
        };
        let mut pair_data = Vec::new();
        for p in pairs {
            render(p, &mut pair_data)?;
        }
        let mut quad_data = Vec::new();
        for q in quads {
            render(&q.pair1, &mut quad_data)?;
            render(&q.pair2, &mut quad_data)?;
        }
        Ok(Self {
            pairs: pairs.to_vec(),
            pair_data,
            quads: quads.to_vec(),
            quad_data,
        })
    }

    /// `(STO accuracy over pairs, RISI head accuracy over quads)`; NaN for an
    /// empty set.
    pub fn evaluate<T: Real>(&self, model: &Model<T>, chunk: usize) -> Result<(f64, f64)> {
        let sto = if self.pairs.is_empty() {
            f64::NAN
        } else {
            let acts = model.predict_f32(&self.pair_data, self.pairs.len(), chunk)?;
            let hits = acts
                .iter()
                .zip(&self.pairs)
                .filter(|(a, p)| a.sto_class() == p.sto_label)
                .count();
            hits as f64 / self.pairs.len() as f64
        };
        let risi = if self.quads.is_empty() {
            f64::NAN
        } else {
            let acts = model.predict_f32(&self.quad_data, 2 * self.quads.len(), chunk)?;
            let hits = self
                .quads
                .iter()
                .enumerate()
                .filter(|(i, q)| argmax(&model.risi_logits(&acts[2 * i], &acts[2 * i + 1])) == q.category)
                .count();
            hits as f64 / self.quads.len() as f64
        };
        Ok((sto, risi))
    }
}

fn argmax(v: &[f64; N_CATEGORIES]) -> usize {
    (0..N_CATEGORIES).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_sto_acc: f64,
    pub val_risi_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation STO accuracy.
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub last: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn best_metrics(&self) -> BTreeMap<String, f64> {
        let r = &self.history[self.best_epoch - 1];
        BTreeMap::from([
            ("train_loss".to_string(), r.train_loss),
            ("val_sto_acc".to_string(), r.val_sto_acc),
            ("val_risi_acc".to_string(), r.val_risi_acc),
        ])
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_sto_acc,val_risi_acc\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_sto_acc, r.val_risi_acc);
    }
    s
}

/// Re-estimates the running batch-norm statistics from the first
/// `bn_recalibration_batches` batches of `plan`, freshly augmented.
fn recalibrate_bn<S: PairSource + Sync + ?Sized>(
    model: &mut Model<f32>,
    plan: &[&NestedQuad],
    cfg: &TrainConfig,
    store: &S,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut stats = Vec::with_capacity(cfg.bn_recalibration_batches);
    for chunk in plan.chunks(cfg.batch).take(cfg.bn_recalibration_batches) {
        let qs: Vec<NestedQuad> = chunk.iter().map(|&q| q.clone()).collect();
        let batch = assemble_training_batch(&qs, store, &cfg.augmentation, rng)?;
        stats.push(model.batch_stats(&batch.data, 2 * batch.n_quads())?);
    }
    model.set_running_average(&stats);
    Ok(())
}

/// Trains from a fresh seeded initialisation. `quads` holds each training
/// subject's nested quads; `on_epoch` sees every epoch record as it lands.
pub fn train<S: PairSource + Sync + ?Sized>(
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    store: &S,
    quads: &[Vec<NestedQuad>],
    val: &ValidationSet,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.augmentation.crop != encoder.input_dims {
        return Err(NetError::Config(format!(
            "augmentation crop {:?} differs from encoder input {:?}",
            cfg.augmentation.crop, encoder.input_dims
        )));
    }
    if quads.iter().all(|q| q.is_empty()) {
        return Err(NetError::Data(deepatrophy_core::Error::MissingData(
            "no training quads".into(),
        )));
    }
    let model = Model::<f32>::init(encoder, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut trainer = Trainer::new(model, cfg.lr, cfg.momentum, cfg.weights);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut plan: Vec<&NestedQuad> = Vec::new();
        for subject in quads {
            let mut idx: Vec<usize> = (0..subject.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(cfg.quads_per_subject.unwrap_or(usize::MAX));
            idx.sort_unstable();
            plan.extend(idx.into_iter().map(|i| &subject[i]));
        }
        plan.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n_batches = 0;
        for (bi, chunk) in plan.chunks(cfg.batch).enumerate() {
            let qs: Vec<NestedQuad> = chunk.iter().map(|&q| q.clone()).collect();
            let batch = assemble_training_batch(&qs, store, &cfg.augmentation, &mut rng)?;
            let loss = trainer.step_batch(&batch).map_err(|e| match e {
                NetError::Numerical(m) => NetError::Numerical(format!(
                    "{m}; epoch {epoch}, iteration {}, batch {bi}, quads [{}]",
                    trainer.steps,
                    qs.iter()
                        .map(|q| format!("{}|{}", q.pair1.id(), q.pair2.id()))
                        .collect::<Vec<_>>()
                        .join(", ")
                )),
                other => other,
            })?;
            step_losses.push(loss);
            sum += loss;
            n_batches += 1;
        }
        recalibrate_bn(&mut trainer.model, &plan, cfg, store, &mut rng)?;
        let (val_sto_acc, val_risi_acc) = val.evaluate(&trainer.model, cfg.eval_chunk)?;
        let rec = EpochRecord {
            epoch,
            train_loss: sum / n_batches as f64,
            val_sto_acc,
            val_risi_acc,
        };
        on_epoch(&rec);
        // An empty validation set selects the last epoch.
        let score = if val_sto_acc.is_nan() {
            f64::NEG_INFINITY
        } else {
            val_sto_acc
        };
        if best
            .as_ref()
            .is_none_or(|(s, _, _)| score > *s || (score == f64::NEG_INFINITY))
        {
            best = Some((score, epoch, trainer.model.clone()));
        }
        history.push(rec);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: trainer.model,
        history,
        step_losses,
    })
}
