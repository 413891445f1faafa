//! Training-free cache hit-ratio simulation.
//!
//! Only the public-subset sampling and the expiry rule are modelled, so a
//! trace for thousands of rounds costs milliseconds. Because sampling goes
//! through [`rng::public_subset`], a trace produced here matches the hit ratio
//! the orchestrator measures for the same seed, pool and expiry mode.

use serde::{Deserialize, Serialize};

use crate::cache::{ExpiryMode, Round};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitSimConfig {
    pub pool_size: usize,
    pub per_round: usize,
    pub duration: u32,
    pub rounds: u32,
    pub seed: u64,
    /// `Refresh` re-stamps an expired sample on the miss, the classic
    /// lightweight simulation; `Evict` mirrors a cache that deletes it.
    pub expiry: ExpiryMode,
}

impl HitSimConfig {
    pub fn new(pool_size: usize, per_round: usize, duration: u32, rounds: u32, seed: u64) -> Self {
        HitSimConfig {
            pool_size,
            per_round,
            duration,
            rounds,
            seed,
            expiry: ExpiryMode::Refresh,
        }
    }

    pub fn with_expiry(mut self, expiry: ExpiryMode) -> Self {
        self.expiry = expiry;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.per_round == 0 || self.rounds == 0 {
            return Err(Error::InvalidParameter(
                "pool size, per-round count and rounds must be positive".into(),
            ));
        }
        if self.per_round > self.pool_size {
            return Err(Error::InvalidParameter(format!(
                "per-round count {} exceeds pool size {}",
                self.per_round, self.pool_size
            )));
        }
        Ok(())
    }
}

/// Fraction of each round's sampled indices that were valid cache hits.
pub fn simulate_hit_ratio(cfg: &HitSimConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.duration == 0 {
        return Ok(vec![0.0; cfg.rounds as usize]);
    }
    let mut stamp: Vec<Option<Round>> = vec![None; cfg.pool_size];
    let mut ratios = Vec::with_capacity(cfg.rounds as usize);
    for t in 1..=cfg.rounds {
        let mut hits = 0usize;
        for i in rng::public_subset(cfg.seed, t, cfg.pool_size, cfg.per_round) {
            match stamp[i] {
                None => stamp[i] = Some(t),
                Some(c) if t - c > cfg.duration => {
                    stamp[i] = match cfg.expiry {
                        ExpiryMode::Refresh => Some(t),
                        ExpiryMode::Evict => None,
                    }
                }
                Some(_) => hits += 1,
            }
        }
        ratios.push(hits as f64 / cfg.per_round as f64);
    }
    Ok(ratios)
}

/// Mean of `trace` over the 1-based inclusive round range `[from, to]`.
pub fn mean_over_rounds(trace: &[f64], from: u32, to: u32) -> f64 {
    let lo = (from.max(1) - 1) as usize;
    let hi = (to as usize).min(trace.len());
    let window = &trace[lo..hi];
    window.iter().sum::<f64>() / window.len() as f64
}
