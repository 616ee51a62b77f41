//! The basic subnetwork (2-channel 3D ResNet with a 5-output head), its
//! Siamese wrapper with the RISI head, and the manual backward pass.

use deepatrophy_core::Volume3D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Architecture, ConvBn, EncoderConfig, N_CATEGORIES, N_OUTPUTS};
use crate::error::{NetError, Result};
use crate::layers::{
    bn_backward, bn_forward_eval, bn_forward_train, conv_backward, conv_forward, fc_backward, fc_forward, gap_backward,
    gap_forward, relu_backward_inplace, relu_inplace, BnCache, Tensor,
};
use crate::loss::{ce_with_grad, weighted, ActivationVector, LossWeights};
use crate::real::Real;

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the forward pass reports them for the running update.
    Train,
    /// Stored running statistics; deterministic per sample.
    Eval,
}

/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-layer `(mean, unbiased variance)` observed in a training forward pass.
pub type BatchStats = Vec<(Vec<f64>, Vec<f64>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    cfg: EncoderConfig,
    arch: Architecture,
    /// All trainable tensors, laid out as `arch.tensors`.
    pub params: Vec<T>,
    pub running_mean: Vec<Vec<T>>,
    pub running_var: Vec<Vec<T>>,
}

struct BlockCache<T> {
    h1: Tensor<T>,
    bn_a: BnCache<T>,
    bn_b: BnCache<T>,
    bn_sc: Option<BnCache<T>>,
}

/// Everything the backward pass needs from a forward pass.
pub(crate) struct Trace<T> {
    stem_bn: BnCache<T>,
    /// `acts[0]` is the stem output, `acts[i + 1]` the output of block `i`.
    acts: Vec<Tensor<T>>,
    blocks: Vec<BlockCache<T>>,
    features: Vec<T>,
    pub outputs: Vec<T>,
    pub stats: BatchStats,
}

/// Loss, gradient and batch statistics for one batch of quads.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub grad: Vec<T>,
    pub stats: BatchStats,
}

/// Targets for a batch whose rows alternate pair1, pair2 of each quad.
#[derive(Clone, Copy, Debug)]
pub struct QuadTargets<'a> {
    pub sto_labels: &'a [u8],
    pub categories: &'a [usize],
}

impl<T: Real> Model<T> {
    /// All parameters zero, running statistics at their initial values.
    pub fn zeros(cfg: &EncoderConfig) -> Result<Self> {
        let arch = Architecture::new(cfg)?;
        let running_mean = arch.bn_channels.iter().map(|&c| vec![T::zero(); c]).collect();
        let running_var = arch.bn_channels.iter().map(|&c| vec![T::one(); c]).collect();
        Ok(Self {
            cfg: cfg.clone(),
            params: vec![T::zero(); arch.n_params],
            arch,
            running_mean,
            running_var,
        })
    }

    /// Fan-in scaled uniform initialisation: `U(±sqrt(6 / fan_in))` for
    /// convolutions, `U(±1 / sqrt(fan_in))` for fully connected weights,
    /// unit scales and zero shifts and biases.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in &m.arch.tensors {
            let fan_in: usize = t.shape[1..].iter().product();
            let bound = if t.name.ends_with(".conv") {
                (6.0 / fan_in as f64).sqrt()
            } else if t.name.ends_with(".weight") {
                1.0 / (fan_in as f64).sqrt()
            } else {
                let v = if t.name.ends_with(".bn.gamma") {
                    T::one()
                } else {
                    T::zero()
                };
                m.params[t.offset..t.offset + t.len].fill(v);
                continue;
            };
            for p in &mut m.params[t.offset..t.offset + t.len] {
                *p = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(m)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.arch.n_params
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.arch.tensor(name).map(|t| &self.params[t.offset..t.offset + t.len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let t = self.arch.tensor(name)?.clone();
        Some(&mut self.params[t.offset..t.offset + t.len])
    }

    /// The same model in another scalar type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        Model {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            params: conv(&self.params),
            running_mean: self.running_mean.iter().map(|v| conv(v)).collect(),
            running_var: self.running_var.iter().map(|v| conv(v)).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            let name = self
                .arch
                .tensors
                .iter()
                .find(|t| (t.offset..t.offset + t.len).contains(&i))
                .map(|t| t.name.as_str())
                .unwrap_or("?");
            return Err(NetError::Numerical(format!("non-finite parameter {i} in {name}")));
        }
        Ok(())
    }

    fn sample_len(&self) -> usize {
        self.cfg.in_channels * self.cfg.input_dims.iter().product::<usize>()
    }

    fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    /// Wraps a flat `[n, 2, nz, ny, nx]` batch after checking its length.
    pub fn input_tensor(&self, data: &[T], n: usize) -> Result<Tensor<T>> {
        if n == 0 || data.len() != n * self.sample_len() {
            return Err(NetError::Shape(format!(
                "expected {n} samples of {} values ({:?} x {} channels), got {} values",
                self.sample_len(),
                self.cfg.input_dims,
                self.cfg.in_channels,
                data.len()
            )));
        }
        Ok(Tensor::from_vec(
            n,
            self.cfg.in_channels,
            self.cfg.input_dims,
            data.to_vec(),
        ))
    }

    fn conv_bn(&self, x: &Tensor<T>, cb: &ConvBn, mode: Mode, stats: &mut BatchStats) -> (Tensor<T>, BnCache<T>) {
        let g = &cb.conv.geom;
        let z = conv_forward(x, self.slice(cb.conv.w, g.weight_len()), g);
        let gamma = self.slice(cb.bn.gamma, cb.bn.channels);
        let beta = self.slice(cb.bn.beta, cb.bn.channels);
        match mode {
            Mode::Train => {
                let (y, cache, s) = bn_forward_train(&z, gamma, beta);
                stats[cb.bn.slot] = s;
                (y, cache)
            }
            Mode::Eval => bn_forward_eval(
                &z,
                gamma,
                beta,
                &self.running_mean[cb.bn.slot],
                &self.running_var[cb.bn.slot],
            ),
        }
    }

    fn conv_bn_backward(
        &self,
        x: &Tensor<T>,
        cb: &ConvBn,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        need_dx: bool,
        grad: &mut [T],
    ) -> Option<Tensor<T>> {
        let c = cb.bn.channels;
        let (dz, dgamma, dbeta) = bn_backward(dy, cache, self.slice(cb.bn.gamma, c));
        add_into(&mut grad[cb.bn.gamma..cb.bn.gamma + c], &dgamma);
        add_into(&mut grad[cb.bn.beta..cb.bn.beta + c], &dbeta);
        let g = &cb.conv.geom;
        let (dx, dw) = conv_backward(x, self.slice(cb.conv.w, g.weight_len()), &dz, g, need_dx);
        add_into(&mut grad[cb.conv.w..cb.conv.w + g.weight_len()], &dw);
        dx
    }

    /// Full forward pass of the basic subnetwork over a batch of pairs.
    pub(crate) fn trace(&self, x: &Tensor<T>, mode: Mode) -> Trace<T> {
        let mut stats: BatchStats = vec![(Vec::new(), Vec::new()); self.arch.bn_channels.len()];
        let (mut h, stem_bn) = self.conv_bn(x, &self.arch.stem, mode, &mut stats);
        relu_inplace(&mut h);
        let mut acts = vec![h];
        let mut blocks = Vec::with_capacity(self.arch.blocks.len());
        for b in &self.arch.blocks {
            let x = acts.last().expect("stem output");
            let (mut h1, bn_a) = self.conv_bn(x, &b.a, mode, &mut stats);
            relu_inplace(&mut h1);
            let (mut y, bn_b) = self.conv_bn(&h1, &b.b, mode, &mut stats);
            let bn_sc = match &b.shortcut {
                Some(sc) => {
                    let (s, c) = self.conv_bn(x, sc, mode, &mut stats);
                    add_into(&mut y.data, &s.data);
                    Some(c)
                }
                None => {
                    add_into(&mut y.data, &x.data);
                    None
                }
            };
            relu_inplace(&mut y);
            acts.push(y);
            blocks.push(BlockCache { h1, bn_a, bn_b, bn_sc });
        }
        let last = acts.last().expect("encoder output");
        let features = gap_forward(last);
        let c = self.arch.final_channels;
        let outputs = fc_forward(
            &features,
            x.n,
            self.slice(self.arch.fc_w, N_OUTPUTS * c),
            self.slice(self.arch.fc_b, N_OUTPUTS),
            c,
            N_OUTPUTS,
        );
        Trace {
            stem_bn,
            acts,
            blocks,
            features,
            outputs,
            stats,
        }
    }

    /// Gradient of the parameters given `d outputs`, adding into `grad`.
    pub(crate) fn backward(&self, x: &Tensor<T>, tr: &Trace<T>, d_out: &[T], grad: &mut [T]) {
        let n = x.n;
        let c = self.arch.final_channels;
        let (d_feat, dw, db) = fc_backward(
            &tr.features,
            d_out,
            n,
            self.slice(self.arch.fc_w, N_OUTPUTS * c),
            c,
            N_OUTPUTS,
        );
        add_into(&mut grad[self.arch.fc_w..self.arch.fc_w + N_OUTPUTS * c], &dw);
        add_into(&mut grad[self.arch.fc_b..self.arch.fc_b + N_OUTPUTS], &db);
        let mut dy = gap_backward(&d_feat, n, c, self.arch.final_dims);
        for (i, b) in self.arch.blocks.iter().enumerate().rev() {
            let cache = &tr.blocks[i];
            let input = &tr.acts[i];
            relu_backward_inplace(&mut dy, &tr.acts[i + 1]);
            let mut dh1 = self
                .conv_bn_backward(&cache.h1, &b.b, &cache.bn_b, &dy, true, grad)
                .expect("dx requested");
            relu_backward_inplace(&mut dh1, &cache.h1);
            let mut dx = self
                .conv_bn_backward(input, &b.a, &cache.bn_a, &dh1, true, grad)
                .expect("dx requested");
            match (&b.shortcut, &cache.bn_sc) {
                (Some(sc), Some(sc_cache)) => {
                    let ds = self
                        .conv_bn_backward(input, sc, sc_cache, &dy, true, grad)
                        .expect("dx requested");
                    add_into(&mut dx.data, &ds.data);
                }
                _ => add_into(&mut dx.data, &dy.data),
            }
            dy = dx;
        }
        relu_backward_inplace(&mut dy, &tr.acts[0]);
        self.conv_bn_backward(x, &self.arch.stem, &tr.stem_bn, &dy, false, grad);
    }

    /// The RISI head on the concatenated activations of the two pairs.
    pub fn risi_logits_raw(&self, act1: &[T], act2: &[T]) -> [T; N_CATEGORIES] {
        let mut cat = Vec::with_capacity(2 * N_OUTPUTS);
        cat.extend_from_slice(act1);
        cat.extend_from_slice(act2);
        let y = fc_forward(
            &cat,
            1,
            self.slice(self.arch.risi_w, N_CATEGORIES * 2 * N_OUTPUTS),
            self.slice(self.arch.risi_b, N_CATEGORIES),
            2 * N_OUTPUTS,
            N_CATEGORIES,
        );
        [y[0], y[1], y[2], y[3]]
    }

    pub fn risi_logits(&self, act1: &ActivationVector, act2: &ActivationVector) -> [f64; N_CATEGORIES] {
        let a: Vec<T> = act1.0.iter().map(|&v| T::of(v)).collect();
        let b: Vec<T> = act2.0.iter().map(|&v| T::of(v)).collect();
        self.risi_logits_raw(&a, &b).map(|v| v.f64())
    }

    /// Basic-subnetwork outputs for a flat batch of pairs.
    pub fn predict(&self, data: &[T], n: usize, mode: Mode) -> Result<Vec<ActivationVector>> {
        let x = self.input_tensor(data, n)?;
        let tr = self.trace(&x, mode);
        to_activations(&tr.outputs)
    }

    /// Evaluation-mode outputs for a batch of `f32` pairs, processed in
    /// chunks of `chunk` samples.
    pub fn predict_f32(&self, data: &[f32], n: usize, chunk: usize) -> Result<Vec<ActivationVector>> {
        let len = self.sample_len();
        if data.len() != n * len {
            return Err(NetError::Shape(format!(
                "expected {} values for {n} samples, got {}",
                n * len,
                data.len()
            )));
        }
        let mut out = Vec::with_capacity(n);
        for part in data.chunks(chunk.max(1) * len) {
            let xs: Vec<T> = part.iter().map(|&v| T::of(v as f64)).collect();
            out.extend(self.predict(&xs, part.len() / len, Mode::Eval)?);
        }
        Ok(out)
    }

    fn pack_volumes(&self, vols: &[&Volume3D]) -> Result<Vec<T>> {
        let mut data = Vec::with_capacity(vols.len() * self.sample_len() / 2);
        for v in vols {
            if v.dims() != self.cfg.input_dims {
                return Err(NetError::Shape(format!(
                    "volume dims {:?} do not match configured input {:?}",
                    v.dims(),
                    self.cfg.input_dims
                )));
            }
            data.extend(v.data().iter().map(|&x| T::of(x as f64)));
        }
        Ok(data)
    }

    /// The five activations for one pair, in evaluation mode. Slot 0 and
    /// slot 1 enter as channels 0 and 1.
    pub fn forward_basic(&self, v0: &Volume3D, v1: &Volume3D) -> Result<ActivationVector> {
        let data = self.pack_volumes(&[v0, v1])?;
        Ok(self.predict(&data, 1, Mode::Eval)?[0])
    }

    /// Both pairs of a quad through the shared subnetwork, then the RISI head.
    pub fn forward_siamese(
        &self,
        pair1: (&Volume3D, &Volume3D),
        pair2: (&Volume3D, &Volume3D),
    ) -> Result<(ActivationVector, ActivationVector, [f64; N_CATEGORIES])> {
        let data = self.pack_volumes(&[pair1.0, pair1.1, pair2.0, pair2.1])?;
        let x = self.input_tensor(&data, 2)?;
        let tr = self.trace(&x, Mode::Eval);
        let acts = to_activations(&tr.outputs)?;
        let logits = self.risi_logits_raw(&tr.outputs[..N_OUTPUTS], &tr.outputs[N_OUTPUTS..]);
        Ok((acts[0], acts[1], logits.map(|v| v.f64())))
    }

    /// Mean over quads of `w_sto (sto1 + sto2) + w_risi ce4` and its output
    /// gradient. The RISI head gradient is added into `grad`.
    fn quad_loss(
        &self,
        outputs: &[T],
        targets: QuadTargets,
        weights: &LossWeights,
        grad: Option<&mut [T]>,
    ) -> Result<(f64, Vec<T>)> {
        let nq = targets.categories.len();
        let mut d_out = vec![T::zero(); outputs.len()];
        let mut grad = grad;
        let scale = 1.0 / nq as f64;
        let mut total = 0.0;
        let rw = N_CATEGORIES * 2 * N_OUTPUTS;
        for q in 0..nq {
            let rows = &outputs[2 * q * N_OUTPUTS..(2 * q + 2) * N_OUTPUTS];
            if rows.iter().any(|v| !v.is_finite()) {
                return Err(NetError::Numerical(format!("non-finite activations for quad {q}")));
            }
            let mut sto = 0.0;
            if weights.w_sto != 0.0 {
                for r in 0..2 {
                    let label = targets.sto_labels[2 * q + r];
                    let (l, g) = ce_with_grad(&rows[r * N_OUTPUTS..r * N_OUTPUTS + 2], label as usize);
                    sto += l.f64();
                    let k = T::of(weights.w_sto * scale);
                    for (i, gi) in g.into_iter().enumerate() {
                        let d = &mut d_out[(2 * q + r) * N_OUTPUTS + i];
                        *d = *d + k * gi;
                    }
                }
            }
            let mut risi = 0.0;
            if weights.w_risi != 0.0 {
                let logits = self.risi_logits_raw(&rows[..N_OUTPUTS], &rows[N_OUTPUTS..]);
                let (l, g) = ce_with_grad(&logits, targets.categories[q]);
                risi = l.f64();
                let k = T::of(weights.w_risi * scale);
                let dl: Vec<T> = g.into_iter().map(|v| v * k).collect();
                let (dcat, dw, db) = fc_backward(
                    rows,
                    &dl,
                    1,
                    self.slice(self.arch.risi_w, rw),
                    2 * N_OUTPUTS,
                    N_CATEGORIES,
                );
                if let Some(grad) = grad.as_deref_mut() {
                    add_into(&mut grad[self.arch.risi_w..self.arch.risi_w + rw], &dw);
                    add_into(&mut grad[self.arch.risi_b..self.arch.risi_b + N_CATEGORIES], &db);
                }
                add_into(&mut d_out[2 * q * N_OUTPUTS..(2 * q + 2) * N_OUTPUTS], &dcat);
            }
            total += weighted(weights, sto, risi);
        }
        Ok((total * scale, d_out))
    }

    fn check_targets(&self, n: usize, targets: QuadTargets) -> Result<()> {
        if n % 2 != 0 || targets.sto_labels.len() != n || targets.categories.len() * 2 != n {
            return Err(NetError::Shape(format!(
                "{n} rows need {n} STO labels and {} categories, got {} and {}",
                n / 2,
                targets.sto_labels.len(),
                targets.categories.len()
            )));
        }
        if targets.sto_labels.iter().any(|&l| l > 1) || targets.categories.iter().any(|&c| c >= N_CATEGORIES) {
            return Err(NetError::Config("STO labels must be 0/1 and categories < 4".into()));
        }
        Ok(())
    }

    /// Batch loss without gradients.
    pub fn batch_loss(&self, data: &[T], targets: QuadTargets, weights: &LossWeights, mode: Mode) -> Result<f64> {
        weights.validate()?;
        let n = targets.sto_labels.len();
        self.check_targets(n, targets)?;
        let x = self.input_tensor(data, n)?;
        let tr = self.trace(&x, mode);
        Ok(self.quad_loss(&tr.outputs, targets, weights, None)?.0)
    }

    /// Training-mode loss with the gradient over every parameter.
    pub fn loss_and_grad(&self, data: &[T], targets: QuadTargets, weights: &LossWeights) -> Result<LossGrad<T>> {
        weights.validate()?;
        let n = targets.sto_labels.len();
        self.check_targets(n, targets)?;
        let x = self.input_tensor(data, n)?;
        let tr = self.trace(&x, Mode::Train);
        let mut grad = vec![T::zero(); self.arch.n_params];
        let (loss, d_out) = self.quad_loss(&tr.outputs, targets, weights, Some(&mut grad))?;
        self.backward(&x, &tr, &d_out, &mut grad);
        Ok(LossGrad {
            loss,
            grad,
            stats: tr.stats,
        })
    }

    /// Training-mode batch statistics of every batch-norm layer, without
    /// gradients.
    pub fn batch_stats(&self, data: &[T], n: usize) -> Result<BatchStats> {
        let x = self.input_tensor(data, n)?;
        Ok(self.trace(&x, Mode::Train).stats)
    }

    /// Replaces the running statistics with the plain average of `batches`.
    /// An empty slice leaves them unchanged.
    pub fn set_running_average(&mut self, batches: &[BatchStats]) {
        if batches.is_empty() {
            return;
        }
        let k = batches.len() as f64;
        for slot in 0..self.running_mean.len() {
            for c in 0..self.running_mean[slot].len() {
                let (m, v) = batches
                    .iter()
                    .fold((0.0, 0.0), |(m, v), s| (m + s[slot].0[c], v + s[slot].1[c]));
                self.running_mean[slot][c] = T::of(m / k);
                self.running_var[slot][c] = T::of(v / k);
            }
        }
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        for (slot, (mean, var)) in stats.iter().enumerate() {
            for c in 0..mean.len() {
                let m = &mut self.running_mean[slot][c];
                *m = T::of((1.0 - BN_MOMENTUM) * m.f64() + BN_MOMENTUM * mean[c]);
                let v = &mut self.running_var[slot][c];
                *v = T::of((1.0 - BN_MOMENTUM) * v.f64() + BN_MOMENTUM * var[c]);
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn to_activations<T: Real>(outputs: &[T]) -> Result<Vec<ActivationVector>> {
    outputs
        .chunks(N_OUTPUTS)
        .enumerate()
        .map(|(i, c)| {
            let a = [c[0].f64(), c[1].f64(), c[2].f64(), c[3].f64(), c[4].f64()];
            if a.iter().any(|v| !v.is_finite()) {
                return Err(NetError::Numerical(format!(
                    "non-finite activations for sample {i}: {a:?}"
                )));
            }
            Ok(ActivationVector(a))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_finite() {
        let cfg = EncoderConfig::tiny();
        let a = Model::<f32>::init(&cfg, 7).unwrap();
        let b = Model::<f32>::init(&cfg, 7).unwrap();
        let c = Model::<f32>::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        a.check_finite().unwrap();
        assert!(a.tensor("stem.bn.gamma").unwrap().iter().all(|&g| g == 1.0));
        assert!(a.tensor("head.fc.bias").unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn wrong_input_length_is_a_shape_error() {
        let m = Model::<f64>::init(&EncoderConfig::tiny(), 1).unwrap();
        assert!(matches!(m.predict(&[0.0; 10], 1, Mode::Eval), Err(NetError::Shape(_))));
    }
}
