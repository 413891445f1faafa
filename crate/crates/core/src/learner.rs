//! Local models. The simulator talks to models only through [`Learner`];
//! [`LinearSoftmaxModel`] is the one shipped implementation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::rng::{substream, SimRng, Stream};
use crate::soft_label::{SoftLabel, SoftLabelBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub local_lr: f64,
    pub distill_lr: f64,
    pub local_epochs: u32,
    pub distill_epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            local_lr: 0.1,
            distill_lr: 0.1,
            local_epochs: 2,
            distill_epochs: 2,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Epoch counts may be zero (a no-op step); rates and batch size may not.
    pub fn validate(&self) -> Result<()> {
        if !(self.local_lr > 0.0 && self.local_lr.is_finite())
            || !(self.distill_lr > 0.0 && self.distill_lr.is_finite())
        {
            return Err(Error::InvalidParameter("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean `-Σ q log p`.
    CrossEntropy,
    /// Mean `KL(q ‖ p)` with `q` the teacher.
    KlToTeacher,
}

/// What the round loop needs from a client or server model.
pub trait Learner: Clone + Send + Sync {
    fn initialize(num_classes: usize, feature_dim: usize, rng: &mut SimRng) -> Self;

    fn num_classes(&self) -> usize;

    fn predict(&self, features: &[f64]) -> Result<SoftLabel>;

    /// Soft-labels for `pool[i]` for every `i` in `indices`.
    fn predict_soft_labels(&self, pool: &[Vec<f64>], indices: &[usize]) -> Result<SoftLabelBatch> {
        let labels = indices
            .iter()
            .map(|&i| {
                let x = pool.get(i).ok_or(Error::Misaligned)?;
                self.predict(x)
            })
            .collect::<Result<Vec<_>>>()?;
        SoftLabelBatch::new(labels, indices.to_vec())
    }

    /// `cfg.local_epochs` epochs of mini-batch SGD on mean cross-entropy.
    fn train_local(&mut self, data: &[LabeledSample], cfg: &TrainConfig, rng: &mut SimRng) -> Result<()>;

    /// `cfg.distill_epochs` epochs of mini-batch SGD on mean
    /// `KL(teacher ‖ student)`. Teacher indices address `pool`.
    fn distill(
        &mut self,
        pool: &[Vec<f64>],
        teacher: &SoftLabelBatch,
        cfg: &TrainConfig,
        rng: &mut SimRng,
    ) -> Result<()>;
}

/// `softmax(W x + b)` with `W` stored row-major as `N × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxModel {
    num_classes: usize,
    feature_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Scale of the Gaussian used by [`Learner::initialize`].
pub const INIT_SCALE: f64 = 0.01;

impl LinearSoftmaxModel {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        LinearSoftmaxModel {
            num_classes,
            feature_dim,
            weights: vec![0.0; num_classes * feature_dim],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn from_parts(num_classes: usize, feature_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if num_classes < 2 || feature_dim == 0 {
            return Err(Error::InvalidParameter("model needs N >= 2 and d >= 1".into()));
        }
        if weights.len() != num_classes * feature_dim {
            return Err(Error::DimensionMismatch {
                expected: num_classes * feature_dim,
                actual: weights.len(),
            });
        }
        if bias.len() != num_classes {
            return Err(Error::DimensionMismatch {
                expected: num_classes,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite model parameter".into()));
        }
        Ok(LinearSoftmaxModel {
            num_classes,
            feature_dim,
            weights,
            bias,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// All parameters, weights first.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(&self.bias).copied()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Log-probabilities into `out`, stabilized by max-subtraction.
    fn log_softmax_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.feature_dim..(c + 1) * self.feature_dim];
            *o = self.bias[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + out.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        out.iter_mut().for_each(|z| *z -= lse);
    }

    /// Mean loss over `(x, q)` pairs together with its analytic gradient.
    ///
    /// For both kinds the per-sample gradient with respect to the logits is
    /// `p - q`; the two losses differ only by the teacher entropy.
    pub fn loss_and_gradient(
        &self,
        xs: &[&[f64]],
        targets: &[&[f64]],
        kind: LossKind,
    ) -> Result<(f64, LinearSoftmaxModel)> {
        if xs.len() != targets.len() {
            return Err(Error::Misaligned);
        }
        if xs.is_empty() {
            return Err(Error::Empty("loss over an empty batch"));
        }
        let mut grad = LinearSoftmaxModel::zeros(self.num_classes, self.feature_dim);
        let mut logp = vec![0.0; self.num_classes];
        let mut loss = 0.0;
        for (x, q) in xs.iter().zip(targets) {
            self.check_dim(x)?;
            if q.len() != self.num_classes {
                return Err(Error::DimensionMismatch {
                    expected: self.num_classes,
                    actual: q.len(),
                });
            }
            self.log_softmax_into(x, &mut logp);
            loss += sample_loss(&logp, q, kind);
            grad.accumulate(x, &logp, q);
        }
        let scale = 1.0 / xs.len() as f64;
        grad.weights
            .iter_mut()
            .chain(grad.bias.iter_mut())
            .for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    /// Add `(p - q) ⊗ [x, 1]` to `self` interpreted as a gradient buffer.
    fn accumulate(&mut self, x: &[f64], logp: &[f64], q: &[f64]) {
        for c in 0..self.num_classes {
            let delta = logp[c].exp() - q[c];
            self.bias[c] += delta;
            let row = &mut self.weights[c * self.feature_dim..(c + 1) * self.feature_dim];
            row.iter_mut().zip(x).for_each(|(g, v)| *g += delta * v);
        }
    }

    /// Mini-batch SGD over `n` examples for `epochs` epochs.
    /// `sample(i)` yields example `i` as `(features, target)`.
    fn sgd<'a, F>(&mut self, n: usize, epochs: u32, lr: f64, batch_size: usize, rng: &mut SimRng, sample: F)
    where
        F: Fn(usize) -> (&'a [f64], &'a [f64]),
    {
        let mut order: Vec<usize> = (0..n).collect();
        let mut grad = LinearSoftmaxModel::zeros(self.num_classes, self.feature_dim);
        let mut logp = vec![0.0; self.num_classes];
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch_size) {
                grad.weights
                    .iter_mut()
                    .chain(grad.bias.iter_mut())
                    .for_each(|g| *g = 0.0);
                for &i in chunk {
                    let (x, q) = sample(i);
                    self.log_softmax_into(x, &mut logp);
                    grad.accumulate(x, &logp, q);
                }
                let step = lr / chunk.len() as f64;
                self.weights
                    .iter_mut()
                    .zip(&grad.weights)
                    .for_each(|(w, g)| *w -= step * g);
                self.bias.iter_mut().zip(&grad.bias).for_each(|(w, g)| *w -= step * g);
            }
        }
    }
}

fn sample_loss(logp: &[f64], q: &[f64], kind: LossKind) -> f64 {
    let cross: f64 = q
        .iter()
        .zip(logp)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, lp)| -q * lp)
        .sum();
    match kind {
        LossKind::CrossEntropy => cross,
        LossKind::KlToTeacher => cross + q.iter().filter(|q| **q > 0.0).map(|q| q * q.ln()).sum::<f64>(),
    }
}

fn one_hot_rows(num_classes: usize) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut v = vec![0.0; num_classes];
            v[c] = 1.0;
            v
        })
        .collect()
}

impl Learner for LinearSoftmaxModel {
    fn initialize(num_classes: usize, feature_dim: usize, rng: &mut SimRng) -> Self {
        let mut m = LinearSoftmaxModel::zeros(num_classes, feature_dim);
        m.weights
            .iter_mut()
            .for_each(|w| *w = INIT_SCALE * rng.sample::<f64, _>(StandardNormal));
        m
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, features: &[f64]) -> Result<SoftLabel> {
        self.check_dim(features)?;
        let mut logp = vec![0.0; self.num_classes];
        self.log_softmax_into(features, &mut logp);
        SoftLabel::new(logp.into_iter().map(f64::exp).collect())
    }

    fn train_local(&mut self, data: &[LabeledSample], cfg: &TrainConfig, rng: &mut SimRng) -> Result<()> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("local training data"));
        }
        for s in data {
            self.check_dim(&s.features)?;
            if s.label >= self.num_classes {
                return Err(Error::InvalidParameter(format!("label {} out of range", s.label)));
            }
        }
        let targets = one_hot_rows(self.num_classes);
        self.sgd(data.len(), cfg.local_epochs, cfg.local_lr, cfg.batch_size, rng, |i| {
            (&data[i].features, &targets[data[i].label])
        });
        Ok(())
    }

    fn distill(
        &mut self,
        pool: &[Vec<f64>],
        teacher: &SoftLabelBatch,
        cfg: &TrainConfig,
        rng: &mut SimRng,
    ) -> Result<()> {
        cfg.validate()?;
        for (i, label) in teacher.iter() {
            let x = pool.get(i).ok_or(Error::Misaligned)?;
            self.check_dim(x)?;
            if label.num_classes() != self.num_classes {
                return Err(Error::DimensionMismatch {
                    expected: self.num_classes,
                    actual: label.num_classes(),
                });
            }
        }
        if teacher.is_empty() {
            return Ok(());
        }
        let indices = teacher.sample_indices();
        let labels = teacher.labels();
        self.sgd(
            teacher.len(),
            cfg.distill_epochs,
            cfg.distill_lr,
            cfg.batch_size,
            rng,
            |j| (&pool[indices[j]], labels[j].probs()),
        );
        Ok(())
    }
}

/// [`Learner::predict_soft_labels`] over the whole of `features`.
pub fn predict_soft_labels<L: Learner>(model: &L, features: &[Vec<f64>]) -> Result<SoftLabelBatch> {
    let indices: Vec<usize> = (0..features.len()).collect();
    model.predict_soft_labels(features, &indices)
}

/// [`Learner::train_local`] with the shuffle stream derived from `cfg.seed`.
pub fn train_local<L: Learner>(mut model: L, data: &[LabeledSample], cfg: &TrainConfig) -> Result<L> {
    model.train_local(data, cfg, &mut substream(cfg.seed, Stream::LocalShuffle, 0, 0))?;
    Ok(model)
}

/// [`Learner::distill`] with the shuffle stream derived from `cfg.seed`.
pub fn distill<L: Learner>(mut model: L, pool: &[Vec<f64>], teacher: &SoftLabelBatch, cfg: &TrainConfig) -> Result<L> {
    model.distill(
        pool,
        teacher,
        cfg,
        &mut substream(cfg.seed, Stream::DistillShuffle, 0, 0),
    )?;
    Ok(model)
}

/// Fraction of `data` whose argmax prediction equals the label; `NaN` when
/// `data` is empty.
pub fn accuracy<L: Learner>(model: &L, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for s in data {
        if model.predict(&s.features)?.argmax() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy of `model` on labeled data.
pub fn cross_entropy(model: &LinearSoftmaxModel, data: &[LabeledSample]) -> Result<f64> {
    let targets = one_hot_rows(model.num_classes);
    let xs: Vec<&[f64]> = data.iter().map(|s| s.features.as_slice()).collect();
    let qs: Vec<&[f64]> = data.iter().map(|s| targets[s.label].as_slice()).collect();
    Ok(model.loss_and_gradient(&xs, &qs, LossKind::CrossEntropy)?.0)
}
