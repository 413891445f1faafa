//! Oracles shared by several integration test targets.

#![allow(dead_code)]

use fdsim_core::learner::{LinearSoftmaxModel, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct GradInstance {
    pub model: LinearSoftmaxModel,
    pub xs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// Random `N = 3`, `d = 4` model and batch. Cross-entropy instances get
/// one-hot targets, KL instances strictly positive soft targets.
pub fn random_instance(seed: u64, kind: LossKind) -> GradInstance {
    let (n, d) = (3, 4);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let weights = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let model = LinearSoftmaxModel::from_parts(n, d, weights, bias).unwrap();
    let batch = rng.random_range(1..=6);
    let xs = (0..batch)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let targets = (0..batch)
        .map(|_| match kind {
            LossKind::CrossEntropy => {
                let mut t = vec![0.0; n];
                t[rng.random_range(0..n)] = 1.0;
                t
            }
            LossKind::KlToTeacher => {
                let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            }
        })
        .collect();
    GradInstance { model, xs, targets }
}

/// Relative error between the analytic gradient and central differences with
/// step `h`, measured as `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn finite_difference_error(inst: &GradInstance, kind: LossKind, h: f64) -> f64 {
    let xs: Vec<&[f64]> = inst.xs.iter().map(Vec::as_slice).collect();
    let qs: Vec<&[f64]> = inst.targets.iter().map(Vec::as_slice).collect();
    let (_, grad) = inst.model.loss_and_gradient(&xs, &qs, kind).unwrap();
    let analytic: Vec<f64> = grad.parameters().collect();

    let params: Vec<f64> = inst.model.parameters().collect();
    let (n, d) = (inst.model.bias().len(), inst.model.feature_dim());
    let loss_at = |p: &[f64]| {
        let m = LinearSoftmaxModel::from_parts(n, d, p[..n * d].to_vec(), p[n * d..].to_vec()).unwrap();
        m.loss_and_gradient(&xs, &qs, kind).unwrap().0
    };
    let numeric: Vec<f64> = (0..params.len())
        .map(|j| {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[j] += h;
            minus[j] -= h;
            (loss_at(&plus) - loss_at(&minus)) / (2.0 * h)
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8)
}
