//! End-to-end behaviour of the softmax-linear learner.

mod common;

use fdsim_core::data::{generate_task, LabeledSample, SyntheticTaskSpec};
use fdsim_core::learner::{
    accuracy, cross_entropy, distill, predict_soft_labels, train_local, Learner, LinearSoftmaxModel, LossKind,
    TrainConfig,
};
use fdsim_core::rng::{substream, Stream};
use fdsim_core::soft_label::{SoftLabel, SoftLabelBatch};

#[test]
fn gradients_match_central_differences() {
    for kind in [LossKind::CrossEntropy, LossKind::KlToTeacher] {
        for seed in 0..100 {
            let inst = common::random_instance(seed, kind);
            let err = common::finite_difference_error(&inst, kind, 1e-5);
            assert!(err <= 1e-5, "{kind:?} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn one_hot_teacher_loss_equals_cross_entropy() {
    for seed in 0..20 {
        let inst = common::random_instance(seed, LossKind::CrossEntropy);
        let xs: Vec<&[f64]> = inst.xs.iter().map(Vec::as_slice).collect();
        let qs: Vec<&[f64]> = inst.targets.iter().map(Vec::as_slice).collect();
        let (ce, _) = inst.model.loss_and_gradient(&xs, &qs, LossKind::CrossEntropy).unwrap();
        let (kl, _) = inst.model.loss_and_gradient(&xs, &qs, LossKind::KlToTeacher).unwrap();
        // one-hot teachers have zero entropy, so the two losses coincide
        assert!((ce - kl).abs() <= 1e-9);
    }
}

fn default_task() -> fdsim_core::data::SyntheticTask {
    generate_task(&SyntheticTaskSpec {
        seed: 17,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn centralized_training_reaches_95_percent() {
    let task = default_task();
    let cfg = TrainConfig {
        local_epochs: 200,
        seed: 1,
        ..Default::default()
    };
    let model = train_local(LinearSoftmaxModel::zeros(10, 32), &task.private_pool, &cfg).unwrap();
    let acc = accuracy(&model, &task.test_pool).unwrap();
    assert!(acc >= 0.95, "test accuracy {acc}");
}

#[test]
fn local_training_does_not_increase_loss() {
    let task = default_task();
    let data = &task.private_pool[..300];
    let mut model = LinearSoftmaxModel::initialize(10, 32, &mut substream(3, Stream::ClientInit, 0, 0));
    let before = cross_entropy(&model, data).unwrap();
    for lr in [0.01, 0.05, 0.1] {
        let cfg = TrainConfig {
            local_lr: lr,
            local_epochs: 2,
            seed: 4,
            ..Default::default()
        };
        model = train_local(model, data, &cfg).unwrap();
        let after = cross_entropy(&model, data).unwrap();
        assert!(after <= before, "lr {lr}: {after} > {before}");
    }
}

#[test]
fn separable_two_class_fit() {
    let data: Vec<LabeledSample> = (0..200)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 0 { -1.0 } else { 1.0 };
            LabeledSample {
                features: vec![sign * (1.0 + (i as f64 * 0.37).sin().abs()), (i as f64 * 0.91).cos()],
                label,
            }
        })
        .collect();
    let cfg = TrainConfig {
        local_epochs: 50,
        ..Default::default()
    };
    let model = train_local(LinearSoftmaxModel::zeros(2, 2), &data, &cfg).unwrap();
    assert!(accuracy(&model, &data).unwrap() >= 0.99);
}

#[test]
fn student_recovers_teacher_accuracy() {
    let task = default_task();
    let teacher_cfg = TrainConfig {
        local_epochs: 100,
        seed: 5,
        ..Default::default()
    };
    let teacher = train_local(LinearSoftmaxModel::zeros(10, 32), &task.private_pool, &teacher_cfg).unwrap();
    let labels = predict_soft_labels(&teacher, &task.public_pool).unwrap();
    let cfg = TrainConfig {
        distill_epochs: 2 * 50,
        seed: 6,
        ..Default::default()
    };
    let student = distill(LinearSoftmaxModel::zeros(10, 32), &task.public_pool, &labels, &cfg).unwrap();
    let (t, s) = (
        accuracy(&teacher, &task.test_pool).unwrap(),
        accuracy(&student, &task.test_pool).unwrap(),
    );
    assert!(s >= t - 0.05, "student {s} vs teacher {t}");
}

#[test]
fn distillation_rejects_misaligned_teacher() {
    let teacher = SoftLabelBatch::new(vec![SoftLabel::uniform(10).unwrap()], vec![5]).unwrap();
    let pool = vec![vec![0.0; 32]; 3];
    assert!(distill(
        LinearSoftmaxModel::zeros(10, 32),
        &pool,
        &teacher,
        &TrainConfig::default()
    )
    .is_err());
}
