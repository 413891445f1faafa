//! WebAssembly bindings for the interactive demo in `www/`.
//!
//! Every export takes and returns plain numbers or flat numeric arrays so the
//! page needs no glue beyond the generated module. Errors surface as strings.

use fdsim_core::aggregation::{enhanced_era, era};
use fdsim_core::cache::ExpiryMode;
use fdsim_core::data::{dirichlet_proportions, largest_remainder, PartitionSpec};
use fdsim_core::hitsim::{simulate_hit_ratio, HitSimConfig};
use fdsim_core::soft_label::{entropy, SoftLabel};
use wasm_bindgen::prelude::*;

/// Per-round cache hit ratio for a pool sampled `per_round` at a time.
#[wasm_bindgen]
pub fn hit_ratio_curve(
    pool: usize,
    per_round: usize,
    duration: u32,
    rounds: u32,
    seed: u64,
    evict: bool,
) -> Result<Vec<f64>, String> {
    let expiry = if evict { ExpiryMode::Evict } else { ExpiryMode::Refresh };
    let cfg = HitSimConfig::new(pool, per_round, duration, rounds, seed).with_expiry(expiry);
    simulate_hit_ratio(&cfg).map_err(|e| e.to_string())
}

/// Normalize non-negative weights into a probability vector.
fn to_label(weights: &[f64]) -> Result<SoftLabel, String> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || sum <= 0.0 {
        return Err("weights must be non-negative with a positive sum".into());
    }
    SoftLabel::new(weights.iter().map(|w| w / sum).collect()).map_err(|e| e.to_string())
}

/// Power sharpening `z^β / Σ z^β` of the normalized weights.
#[wasm_bindgen]
pub fn sharpen_power(weights: &[f64], beta: f64) -> Result<Vec<f64>, String> {
    let z = to_label(weights)?;
    enhanced_era(z.probs(), beta).map_err(|e| e.to_string())
}

/// Temperature softmax of the normalized weights.
#[wasm_bindgen]
pub fn sharpen_softmax(weights: &[f64], temperature: f64) -> Result<Vec<f64>, String> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(format!("temperature {temperature} must be positive"));
    }
    Ok(era(to_label(weights)?.probs(), temperature))
}

/// Shannon entropy in nats of the normalized weights.
#[wasm_bindgen]
pub fn entropy_nats(weights: &[f64]) -> Result<f64, String> {
    Ok(entropy(&to_label(weights)?))
}

/// Sample counts of a Dirichlet label-skew split, flattened row-major as
/// `[class][client]`, with `per_class` samples in every class.
#[wasm_bindgen]
pub fn partition_counts(
    num_classes: usize,
    num_clients: usize,
    per_class: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<u32>, String> {
    if num_classes == 0 {
        return Err("num_classes must be positive".into());
    }
    let spec = PartitionSpec {
        num_clients,
        dirichlet_alpha: alpha,
        seed,
    };
    let proportions = dirichlet_proportions(num_classes, &spec).map_err(|e| e.to_string())?;
    Ok(proportions
        .iter()
        .flat_map(|p| largest_remainder(per_class, p))
        .map(|c| c as u32)
        .collect())
}
