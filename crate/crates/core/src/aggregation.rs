//! Server-side aggregation of client soft-labels.
//!
//! All policies first average the client batches, then optionally sharpen each
//! averaged vector:
//!
//! * `Era`: temperature softmax applied to the averaged probabilities,
//!   `softmax(z̄ / T)`.
//! * `EnhancedEra`: power normalization, `z̄_i^β / Σ_j z̄_j^β`. `β = 1` is the
//!   identity, larger `β` sharpens monotonically (the output for a larger
//!   exponent is majorized by the output for a smaller one).
//! * `PlainMean`: the average itself.
//!
//! The log-ratio helpers expose the closed forms of `ln(ẑ_i / ẑ_j)` for both
//! sharpeners; they double as test oracles for [`aggregate`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::soft_label::{compensated_sum, mean_soft_labels, SoftLabel, SoftLabelBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationPolicy {
    Era { temperature: f64 },
    EnhancedEra { beta: f64 },
    PlainMean,
}

impl AggregationPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregationPolicy::Era { temperature } if !(temperature > 0.0 && temperature.is_finite()) => Err(
                Error::InvalidParameter(format!("ERA temperature must be positive, got {temperature}")),
            ),
            AggregationPolicy::EnhancedEra { beta } if !(beta > 0.0 && beta.is_finite()) => Err(
                Error::InvalidParameter(format!("Enhanced ERA beta must be positive, got {beta}")),
            ),
            _ => Ok(()),
        }
    }

    /// Sharpen one averaged soft-label.
    pub fn sharpen(&self, mean: &SoftLabel) -> Result<SoftLabel> {
        match *self {
            AggregationPolicy::Era { temperature } => SoftLabel::new(era(mean.probs(), temperature)),
            AggregationPolicy::EnhancedEra { beta } => SoftLabel::new(enhanced_era(mean.probs(), beta)?),
            AggregationPolicy::PlainMean => Ok(mean.clone()),
        }
    }
}

/// Temperature softmax of `values / temperature`, max-shifted for stability.
pub fn era(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total = compensated_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / total).collect()
}

/// Power normalization `x_i^β / Σ_j x_j^β` of a non-negative vector.
///
/// The input need not sum to one; any positive rescaling of `values` yields the
/// same output. `0^β` is `0` for every `β > 0`.
pub fn enhanced_era(values: &[f64], beta: f64) -> Result<Vec<f64>> {
    if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "power normalization needs non-negative finite input".into(),
        ));
    }
    let powered: Vec<f64> = values.iter().map(|v| v.powf(beta)).collect();
    let total = compensated_sum(powered.iter().copied());
    assert!(total > 0.0, "power normalization of an all-zero vector");
    Ok(powered.into_iter().map(|p| p / total).collect())
}

/// Average the client batches and sharpen every sample with `policy`.
pub fn aggregate(client_batches: &[SoftLabelBatch], policy: AggregationPolicy) -> Result<SoftLabelBatch> {
    policy.validate()?;
    let mean = mean_soft_labels(client_batches)?;
    if matches!(policy, AggregationPolicy::PlainMean) {
        return Ok(mean);
    }
    let (labels, indices) = mean.into_parts();
    let sharpened = labels.iter().map(|l| policy.sharpen(l)).collect::<Result<Vec<_>>>()?;
    SoftLabelBatch::new(sharpened, indices)
}

/// Prefix-sum majorization check between the power-normalized vectors for
/// `beta1 < beta2`: every prefix mass of the sharper vector is at most the
/// prefix mass of the softer one (plus `1e-12`).
///
/// `x` must be sorted non-decreasing.
pub fn majorization_holds(x: &[f64], beta1: f64, beta2: f64) -> Result<bool> {
    if x.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Unsorted);
    }
    if !(beta1 > 0.0 && beta2 > beta1) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta1 < beta2, got {beta1}, {beta2}"
        )));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParameter("entries must lie in [0, 1]".into()));
    }
    let p1: Vec<f64> = x.iter().map(|v| v.powf(beta1)).collect();
    let p2: Vec<f64> = x.iter().map(|v| v.powf(beta2)).collect();
    let total1 = compensated_sum(p1.iter().copied());
    let total2 = compensated_sum(p2.iter().copied());
    let mut prefix1 = 0.0;
    let mut prefix2 = 0.0;
    for (a, b) in p1.iter().zip(&p2) {
        prefix1 += a;
        prefix2 += b;
        if prefix2 / total2 > prefix1 / total1 + 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `ln(ẑ_i / ẑ_j)` under temperature softmax: `(z̄_i − z̄_j) / T`.
pub fn log_ratio_era(z_bar_i: f64, z_bar_j: f64, temperature: f64) -> f64 {
    (z_bar_i - z_bar_j) / temperature
}

/// `ln(ẑ_i / ẑ_j)` under power normalization: `β · ln(z̄_i / z̄_j)`.
pub fn log_ratio_enhanced_era(z_bar_i: f64, z_bar_j: f64, beta: f64) -> f64 {
    beta * (z_bar_i / z_bar_j).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::soft_label::entropy;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single(v: &[f64]) -> SoftLabelBatch {
        SoftLabelBatch::new(vec![SoftLabel::new(v.to_vec()).unwrap()], vec![0]).unwrap()
    }

    #[test]
    fn era_uniform_stays_uniform() {
        for t in [0.01, 0.1, 1.0, 7.5] {
            let out = aggregate(&[single(&[0.25; 4])], AggregationPolicy::Era { temperature: t }).unwrap();
            for p in out.labels()[0].probs() {
                assert_abs_diff_eq!(*p, 0.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn enhanced_era_reference_values() {
        let out = aggregate(
            &[single(&[0.6, 0.3, 0.1])],
            AggregationPolicy::EnhancedEra { beta: 2.0 },
        )
        .unwrap();
        // (0.36, 0.09, 0.01) / 0.46
        let expect = [0.36 / 0.46, 0.09 / 0.46, 0.01 / 0.46];
        for (p, e) in out.labels()[0].probs().iter().zip(expect) {
            assert_abs_diff_eq!(*p, e, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(out.labels()[0].probs()[0], 0.782609, epsilon = 1e-6);
        assert_abs_diff_eq!(out.labels()[0].probs()[2], 0.021739, epsilon = 1e-6);
    }

    #[test]
    fn era_reference_values() {
        let out = aggregate(&[single(&[0.9, 0.1])], AggregationPolicy::Era { temperature: 0.1 }).unwrap();
        let e9 = 9f64.exp();
        let e1 = 1f64.exp();
        assert_abs_diff_eq!(out.labels()[0].probs()[0], e9 / (e9 + e1), epsilon = 1e-12);
        assert_abs_diff_eq!(out.labels()[0].probs()[0], 0.999665, epsilon = 1e-6);
        assert_abs_diff_eq!(out.labels()[0].probs()[1], 0.000335, epsilon = 1e-6);
    }

    #[test]
    fn zero_entries_stay_zero_under_power() {
        let out = enhanced_era(&[0.0, 0.25, 0.75], 0.5).unwrap();
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn invalid_policies_rejected() {
        let b = single(&[0.5, 0.5]);
        assert!(aggregate(std::slice::from_ref(&b), AggregationPolicy::Era { temperature: 0.0 }).is_err());
        assert!(aggregate(&[b], AggregationPolicy::EnhancedEra { beta: -1.0 }).is_err());
    }

    #[test]
    fn majorization_examples() {
        assert!(majorization_holds(&[0.5, 0.5], 1.0, 2.0).unwrap());
        assert!(majorization_holds(&[0.1, 0.9], 1.0, 2.0).unwrap());
        // smallest entry for beta = 2 is 0.01 / 0.82
        assert_abs_diff_eq!(enhanced_era(&[0.1, 0.9], 2.0).unwrap()[0], 0.01 / 0.82, epsilon = 1e-15);
        assert!(matches!(
            majorization_holds(&[0.9, 0.1], 1.0, 2.0),
            Err(Error::Unsorted)
        ));
    }

    #[test]
    fn worked_log_ratio_pairs() {
        assert_abs_diff_eq!(log_ratio_era(0.15, 0.10, 1.0), 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(log_ratio_era(0.30, 0.20, 1.0), 0.10, epsilon = 1e-15);
        assert_eq!(log_ratio_era(0.4, 0.4, 0.3), 0.0);
        let a = log_ratio_enhanced_era(0.15, 0.10, 1.0);
        let b = log_ratio_enhanced_era(0.30, 0.20, 1.0);
        assert_abs_diff_eq!(a, 1.5f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(a, 0.405465, epsilon = 1e-6);
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        assert_eq!(log_ratio_enhanced_era(0.5, 0.5, 3.0), 0.0);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn beta_one_is_identity(v in simplex(8)) {
            let out = aggregate(&[single(&v)], AggregationPolicy::EnhancedEra { beta: 1.0 }).unwrap();
            let input = SoftLabel::new(v).unwrap();
            for (a, b) in out.labels()[0].probs().iter().zip(input.probs()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn entropy_non_increasing_in_beta(v in simplex(6), b1 in 0.05f64..8.0, gap in 0.0f64..4.0) {
            let b2 = (b1 + gap).min(8.0);
            let l = SoftLabel::new(v).unwrap();
            let h1 = entropy(&AggregationPolicy::EnhancedEra { beta: b1 }.sharpen(&l).unwrap());
            let h2 = entropy(&AggregationPolicy::EnhancedEra { beta: b2 }.sharpen(&l).unwrap());
            prop_assert!(h2 <= h1 + 1e-10);
        }

        #[test]
        fn argmax_preserved(v in simplex(5), t in 0.01f64..5.0, beta in 0.1f64..10.0) {
            let l = SoftLabel::new(v).unwrap();
            let era = AggregationPolicy::Era { temperature: t }.sharpen(&l).unwrap();
            let pow = AggregationPolicy::EnhancedEra { beta }.sharpen(&l).unwrap();
            prop_assert_eq!(era.argmax(), l.argmax());
            prop_assert_eq!(pow.argmax(), l.argmax());
        }

        #[test]
        fn power_normalization_scale_invariant(v in simplex(7), c in 0.01f64..100.0, beta in 0.2f64..6.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let a = enhanced_era(&v, beta).unwrap();
            let b = enhanced_era(&scaled, beta).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
