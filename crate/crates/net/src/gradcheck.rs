//! Central finite-difference verification of the analytic gradient.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{NetError, Result};
use crate::loss::LossWeights;
use crate::model::{Mode, Model, QuadTargets};

/// Which parameters the random subset is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSet {
    All,
    /// Only the fully connected heads, in which every output is linear.
    Heads,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Relative step, scaled by `max(1, |p|)`.
    pub eps: f64,
    pub n_params: usize,
    pub seed: u64,
    pub set: ParamSet,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Doubles the largest analytic entry of the subset before comparing.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            n_params: 64,
            seed: 0,
            set: ParamSet::All,
            floor: 1e-7,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares the training-mode gradient of the batch loss with central
/// differences over a random parameter subset.
pub fn grad_check(
    model: &Model<f64>,
    data: &[f64],
    targets: QuadTargets,
    weights: &LossWeights,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&cfg.eps) {
        return Err(NetError::Config(format!(
            "finite-difference step {} outside [1e-5, 1e-2]",
            cfg.eps
        )));
    }
    let range = match cfg.set {
        ParamSet::All => 0..model.n_params(),
        ParamSet::Heads => model.arch().head_range(),
    };
    let k = cfg.n_params.min(range.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, range.len(), k)
        .into_iter()
        .map(|i| range.start + i)
        .collect();
    picked.sort_unstable();

    let mut analytic: Vec<f64> = {
        let lg = model.loss_and_grad(data, targets, weights)?;
        picked.iter().map(|&i| lg.grad[i]).collect()
    };
    if cfg.corrupt {
        if let Some(j) = (0..analytic.len()).max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs())) {
            analytic[j] *= 2.0;
        }
    }

    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(k);
    for (&i, &a) in picked.iter().zip(&analytic) {
        let p = model.params[i];
        let h = cfg.eps * p.abs().max(1.0);
        probe.params[i] = p + h;
        let up = probe.batch_loss(data, targets, weights, Mode::Train)?;
        probe.params[i] = p - h;
        let down = probe.batch_loss(data, targets, weights, Mode::Train)?;
        probe.params[i] = p;
        let n = (up - down) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
        let tensor = model
            .arch()
            .tensors
            .iter()
            .find(|t| (t.offset..t.offset + t.len).contains(&i))
            .map(|t| t.name.clone())
            .unwrap_or_default();
        entries.push(GradCheckEntry {
            index: i,
            tensor,
            analytic: a,
            numeric: n,
            rel_error: rel,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, entries })
}
