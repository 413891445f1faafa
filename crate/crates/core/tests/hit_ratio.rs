//! Hit-ratio simulation against an independent Monte-Carlo oracle.

use fdsim_core::cache::ExpiryMode;
use fdsim_core::hitsim::{mean_over_rounds, simulate_hit_ratio, HitSimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Separate sampler (partial Fisher-Yates on a different generator) and a
/// last-seen array instead of a cache.
fn oracle_mean(pool: usize, per_round: usize, duration: u32, rounds: u32, mode: ExpiryMode, seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let mut written: Vec<i64> = vec![i64::MIN; pool];
    let mut perm: Vec<usize> = (0..pool).collect();
    let mut total = 0.0;
    let mut counted = 0;
    for t in 1..=rounds as i64 {
        for j in 0..per_round {
            let k = rng.random_range(j..pool);
            perm.swap(j, k);
        }
        let mut hits = 0;
        for &i in &perm[..per_round] {
            if written[i] == i64::MIN {
                written[i] = t;
            } else if t - written[i] <= duration as i64 {
                hits += 1;
            } else {
                written[i] = if mode == ExpiryMode::Refresh { t } else { i64::MIN };
            }
        }
        if (100..=200).contains(&t) {
            total += hits as f64 / per_round as f64;
            counted += 1;
        }
    }
    total / counted as f64
}

#[test]
fn matches_monte_carlo_oracle_at_d50() {
    for mode in [ExpiryMode::Refresh, ExpiryMode::Evict] {
        let mut sim = 0.0;
        let mut oracle = 0.0;
        for seed in 0..30 {
            let cfg = HitSimConfig::new(10_000, 1000, 50, 200, seed).with_expiry(mode);
            sim += mean_over_rounds(&simulate_hit_ratio(&cfg).unwrap(), 100, 200);
            oracle += oracle_mean(10_000, 1000, 50, 200, mode, seed);
        }
        let (sim, oracle) = (sim / 30.0, oracle / 30.0);
        assert!(
            (sim - oracle).abs() <= 0.02,
            "{mode:?}: simulated {sim} vs oracle {oracle}"
        );
    }
}

#[test]
fn long_duration_approaches_full_hits() {
    let trace = simulate_hit_ratio(&HitSimConfig::new(10_000, 1000, 200, 2000, 0)).unwrap();
    assert!(trace.iter().any(|r| *r >= 0.99));
}

#[test]
fn zero_duration_is_all_zero() {
    let trace = simulate_hit_ratio(&HitSimConfig::new(10_000, 1000, 0, 300, 4)).unwrap();
    assert!(trace.iter().all(|r| *r == 0.0));
}
