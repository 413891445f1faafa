//! Probability-vector types and the averaging primitives shared by every
//! other module.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest deviation of the sum from 1 that construction silently repairs.
pub const RENORMALIZE_LIMIT: f64 = 1e-6;
/// Deviations at or below this are treated as exact and left untouched.
const EXACT_SUM_SLACK: f64 = 1e-12;

/// Neumaier-compensated sum, accumulated in iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut carry = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// A normalized probability vector over `N >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidSoftLabel(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidSoftLabel(format!("entry {bad} outside [0, 1]")));
        }
        let sum = compensated_sum(probs.iter().copied());
        let deviation = (sum - 1.0).abs();
        if deviation > RENORMALIZE_LIMIT {
            return Err(Error::InvalidSoftLabel(format!("entries sum to {sum}")));
        }
        if deviation > EXACT_SUM_SLACK {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        if let Some(bad) = probs.iter().find(|p| **p > 1.0) {
            return Err(Error::InvalidSoftLabel(format!("entry {bad} outside [0, 1]")));
        }
        Ok(SoftLabel(probs))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidSoftLabel(format!("need at least 2 classes, got {n}")));
        }
        Ok(SoftLabel(vec![1.0 / n as f64; n]))
    }

    pub fn one_hot(n: usize, class: usize) -> Result<Self> {
        if class >= n {
            return Err(Error::InvalidParameter(format!(
                "class {class} out of range for {n} classes"
            )));
        }
        let mut v = vec![0.0; n];
        v[class] = 1.0;
        SoftLabel::new(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest entry; the first one wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SoftLabel {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        SoftLabel::new(v)
    }
}

impl From<SoftLabel> for Vec<f64> {
    fn from(s: SoftLabel) -> Self {
        s.0
    }
}

impl AsRef<[f64]> for SoftLabel {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Soft-labels for an ordered set of public-pool samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SoftLabelBatch {
    labels: Vec<SoftLabel>,
    sample_indices: Vec<usize>,
}

impl SoftLabelBatch {
    pub fn new(labels: Vec<SoftLabel>, sample_indices: Vec<usize>) -> Result<Self> {
        if labels.len() != sample_indices.len() {
            return Err(Error::InvalidParameter(format!(
                "{} labels for {} indices",
                labels.len(),
                sample_indices.len()
            )));
        }
        let mut seen = HashSet::with_capacity(sample_indices.len());
        for &i in &sample_indices {
            if !seen.insert(i) {
                return Err(Error::DuplicateIndex(i));
            }
        }
        if let Some(first) = labels.first() {
            let n = first.num_classes();
            if let Some(l) = labels.iter().find(|l| l.num_classes() != n) {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: l.num_classes(),
                });
            }
        }
        Ok(SoftLabelBatch { labels, sample_indices })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn labels(&self) -> &[SoftLabel] {
        &self.labels
    }

    pub fn sample_indices(&self) -> &[usize] {
        &self.sample_indices
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &SoftLabel)> {
        self.sample_indices.iter().copied().zip(self.labels.iter())
    }

    pub fn into_parts(self) -> (Vec<SoftLabel>, Vec<usize>) {
        (self.labels, self.sample_indices)
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &SoftLabel) -> f64 {
    entropy_of(p.probs())
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    -compensated_sum(p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()))
}

/// Per-sample, per-class arithmetic mean across client batches.
///
/// Clients are accumulated in slice order with compensated summation, so the
/// result is bit-reproducible for a fixed client ordering.
pub fn mean_soft_labels(batches: &[SoftLabelBatch]) -> Result<SoftLabelBatch> {
    let first = batches.first().ok_or(Error::Empty("no client batches to average"))?;
    if batches.iter().any(|b| b.sample_indices != first.sample_indices) {
        return Err(Error::Misaligned);
    }
    if batches.len() == 1 {
        return Ok(first.clone());
    }
    let k = batches.len() as f64;
    let mut labels = Vec::with_capacity(first.len());
    for (s, head) in first.labels.iter().enumerate() {
        let n = head.num_classes();
        let mut mean = Vec::with_capacity(n);
        for c in 0..n {
            let col = batches.iter().map(|b| {
                let l = &b.labels[s];
                if l.num_classes() != n {
                    Err(Error::DimensionMismatch {
                        expected: n,
                        actual: l.num_classes(),
                    })
                } else {
                    Ok(l.probs()[c])
                }
            });
            let values = col.collect::<Result<Vec<f64>>>()?;
            mean.push(compensated_sum(values) / k);
        }
        labels.push(SoftLabel::new(mean)?);
    }
    Ok(SoftLabelBatch {
        labels,
        sample_indices: first.sample_indices.clone(),
    })
}
