//! Synchronized soft-label cache.
//!
//! The server keeps a [`GlobalCache`] of aggregated soft-labels stamped with
//! the round they were written. Each round it emits one [`CacheSignal`] per
//! public sample it used; clients replay those signals against their own
//! [`LocalCache`] together with a FIFO queue of freshly aggregated labels and
//! end up with exactly the teacher labels the server distilled on.
//!
//! A client that skipped rounds first applies a [`CatchUpPackage`] holding the
//! live entries written while it was away.
//!
//! Expiry: an entry written at round `c` is a hit at round `t` iff
//! `t - c <= D`. What happens to an expired entry is selected by
//! [`ExpiryMode`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::soft_label::{SoftLabel, SoftLabelBatch};

/// Communication round, starting at 1.
pub type Round = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CacheSignal {
    NewlyCached,
    Cached,
    Expired,
}

impl CacheSignal {
    /// Whether the label for this position travels in the fresh-label queue.
    pub fn carries_fresh_label(self) -> bool {
        !matches!(self, CacheSignal::Cached)
    }
}

/// What the cache does with an entry found expired on revisit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpiryMode {
    /// Delete the entry; the fresh label is used this round but only cached on
    /// the next visit (which is then `NEWLY_CACHED`).
    #[default]
    Evict,
    /// Replace the entry with the fresh label stamped with the current round.
    Refresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub label: SoftLabel,
    pub cached_round: Round,
}

fn expired(now: Round, cached_round: Round, duration: u32) -> bool {
    now.saturating_sub(cached_round) > duration
}

/// Server-side cache `index -> (label, round written)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalCache {
    entries: BTreeMap<usize, CacheEntry>,
    duration: u32,
    mode: ExpiryMode,
    last_round: Round,
}

impl GlobalCache {
    pub fn new(duration: u32, mode: ExpiryMode) -> Self {
        GlobalCache {
            entries: BTreeMap::new(),
            duration,
            mode,
            last_round: 0,
        }
    }

    pub fn duration(&self) -> u32 {
        self.duration
    }

    pub fn mode(&self) -> ExpiryMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&CacheEntry> {
        self.entries.get(&index)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &CacheEntry)> {
        self.entries.iter().map(|(i, e)| (*i, e))
    }

    /// Entries that would still be a hit at round `at`.
    pub fn live_entries(&self, at: Round) -> impl Iterator<Item = (usize, &CacheEntry)> {
        let d = self.duration;
        self.entries().filter(move |(_, e)| !expired(at, e.cached_round, d))
    }

    /// Whether `index` would be served from the cache at `round`.
    pub fn is_hit(&self, index: usize, round: Round) -> bool {
        self.entries
            .get(&index)
            .is_some_and(|e| !expired(round, e.cached_round, self.duration))
    }

    /// Samples of this round that clients must compute: missing or expired
    /// entries, in `round_indices` order.
    pub fn compute_request_list(&self, round_indices: &[usize], current_round: Round) -> Vec<usize> {
        round_indices
            .iter()
            .copied()
            .filter(|&i| !self.is_hit(i, current_round))
            .collect()
    }

    /// Record the assembled labels of round `current_round` and emit one signal
    /// per index of `round_indices`.
    ///
    /// `assembled` must hold a label for every index: fresh aggregates for
    /// requested samples, the cached value for hits.
    pub fn update(
        &mut self,
        round_indices: &[usize],
        assembled: &SoftLabelBatch,
        current_round: Round,
    ) -> Result<Vec<CacheSignal>> {
        if current_round < self.last_round {
            return Err(Error::Desync(format!(
                "cache update for round {current_round} after round {}",
                self.last_round
            )));
        }
        let by_index: HashMap<usize, &SoftLabel> = assembled.iter().collect();
        if let Some(&missing) = round_indices.iter().find(|i| !by_index.contains_key(i)) {
            return Err(Error::Coverage(missing));
        }
        self.last_round = current_round;
        let mut signals = Vec::with_capacity(round_indices.len());
        for &i in round_indices {
            let fresh = || CacheEntry {
                label: by_index[&i].clone(),
                cached_round: current_round,
            };
            let signal = match self.entries.get(&i) {
                None => {
                    self.entries.insert(i, fresh());
                    CacheSignal::NewlyCached
                }
                Some(e) if !expired(current_round, e.cached_round, self.duration) => CacheSignal::Cached,
                Some(_) => {
                    match self.mode {
                        ExpiryMode::Evict => {
                            self.entries.remove(&i);
                        }
                        ExpiryMode::Refresh => {
                            self.entries.insert(i, fresh());
                        }
                    }
                    CacheSignal::Expired
                }
            };
            signals.push(signal);
        }
        Ok(signals)
    }

    /// Live entries written since a client last synchronized.
    ///
    /// `last_participated` is the last round the client took part in (it then
    /// holds every write up to the round before). Writes of round
    /// `current_round - 1` are excluded: they already travel in that round's
    /// update package. Returns an empty package when the client is not stale.
    pub fn build_catch_up(&self, last_participated: Option<Round>, current_round: Round) -> CatchUpPackage {
        let as_of = current_round.saturating_sub(1);
        let mut pkg = CatchUpPackage {
            as_of,
            backfill: BTreeMap::new(),
        };
        if current_round < 2 || last_participated == Some(as_of) {
            return pkg;
        }
        let first_missing = last_participated.unwrap_or(0);
        for (i, e) in self.live_entries(as_of) {
            if e.cached_round >= first_missing && e.cached_round < as_of {
                pkg.backfill.insert(i, e.clone());
            }
        }
        pkg
    }
}

/// Everything a synchronized client needs to rebuild the previous round's
/// teacher labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundUpdatePackage {
    pub round: Round,
    pub indices: Vec<usize>,
    pub signals: Vec<CacheSignal>,
    /// Labels for the non-`CACHED` positions, in index order.
    pub fresh_labels: Vec<SoftLabel>,
}

impl RoundUpdatePackage {
    pub fn new(
        round: Round,
        indices: Vec<usize>,
        signals: Vec<CacheSignal>,
        fresh_labels: Vec<SoftLabel>,
    ) -> Result<Self> {
        if indices.len() != signals.len() {
            return Err(Error::InvalidParameter(format!(
                "{} signals for {} indices",
                signals.len(),
                indices.len()
            )));
        }
        let carried = signals.iter().filter(|s| s.carries_fresh_label()).count();
        if carried != fresh_labels.len() {
            return Err(Error::InvalidParameter(format!(
                "{carried} non-cached signals but {} fresh labels",
                fresh_labels.len()
            )));
        }
        Ok(RoundUpdatePackage {
            round,
            indices,
            signals,
            fresh_labels,
        })
    }

    /// Build the package from the server's assembled labels and the signals
    /// [`GlobalCache::update`] produced for them.
    pub fn from_assembled(round: Round, assembled: &SoftLabelBatch, signals: Vec<CacheSignal>) -> Result<Self> {
        let fresh = assembled
            .labels()
            .iter()
            .zip(&signals)
            .filter(|(_, s)| s.carries_fresh_label())
            .map(|(l, _)| l.clone())
            .collect();
        Self::new(round, assembled.sample_indices().to_vec(), signals, fresh)
    }

    pub fn signal_count(&self) -> usize {
        self.signals.len()
    }

    pub fn fresh_count(&self) -> usize {
        self.fresh_labels.len()
    }
}

/// Backfill for a client that missed rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchUpPackage {
    /// Round whose update package the client will apply next.
    pub as_of: Round,
    pub backfill: BTreeMap<usize, CacheEntry>,
}

impl CatchUpPackage {
    pub fn len(&self) -> usize {
        self.backfill.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backfill.is_empty()
    }
}

/// Client-side mirror of the global cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalCache {
    entries: HashMap<usize, CacheEntry>,
    duration: u32,
    mode: ExpiryMode,
    last_participated_round: Option<Round>,
}

impl LocalCache {
    pub fn new(duration: u32, mode: ExpiryMode) -> Self {
        LocalCache {
            entries: HashMap::new(),
            duration,
            mode,
            last_participated_round: None,
        }
    }

    pub fn last_participated_round(&self) -> Option<Round> {
        self.last_participated_round
    }

    pub fn mark_participated(&mut self, round: Round) {
        self.last_participated_round = Some(round);
    }

    /// Stale at `round` means the client missed round `round - 1`.
    pub fn is_stale(&self, round: Round) -> bool {
        round >= 2 && self.last_participated_round != Some(round - 1)
    }

    pub fn get(&self, index: usize) -> Option<&CacheEntry> {
        self.entries.get(&index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replay one round of signals and rebuild that round's teacher labels.
    pub fn apply_update(&mut self, pkg: &RoundUpdatePackage) -> Result<SoftLabelBatch> {
        let mut queue = pkg.fresh_labels.iter();
        let mut out = Vec::with_capacity(pkg.indices.len());
        for (&i, &signal) in pkg.indices.iter().zip(&pkg.signals) {
            let mut pop = || {
                queue.next().cloned().ok_or_else(|| {
                    Error::Desync(format!(
                        "fresh-label queue exhausted at index {i} (round {})",
                        pkg.round
                    ))
                })
            };
            match signal {
                CacheSignal::NewlyCached => {
                    let label = pop()?;
                    self.entries.insert(
                        i,
                        CacheEntry {
                            label: label.clone(),
                            cached_round: pkg.round,
                        },
                    );
                    out.push(label);
                }
                CacheSignal::Cached => {
                    let entry = self.entries.get(&i).ok_or_else(|| {
                        Error::Desync(format!(
                            "CACHED signal for index {i} missing locally (round {})",
                            pkg.round
                        ))
                    })?;
                    if expired(pkg.round, entry.cached_round, self.duration) {
                        return Err(Error::Desync(format!(
                            "CACHED signal for index {i} written at round {} is older than {} rounds at round {}",
                            entry.cached_round, self.duration, pkg.round
                        )));
                    }
                    out.push(entry.label.clone());
                }
                CacheSignal::Expired => {
                    self.entries.remove(&i);
                    let label = pop()?;
                    if self.mode == ExpiryMode::Refresh {
                        self.entries.insert(
                            i,
                            CacheEntry {
                                label: label.clone(),
                                cached_round: pkg.round,
                            },
                        );
                    }
                    out.push(label);
                }
            }
        }
        if queue.next().is_some() {
            return Err(Error::Desync(format!(
                "fresh labels left over after round {}",
                pkg.round
            )));
        }
        SoftLabelBatch::new(out, pkg.indices.clone())
    }

    /// Install a backfill and drop entries that can no longer be served.
    pub fn apply_catch_up(&mut self, pkg: &CatchUpPackage) {
        for (&i, e) in &pkg.backfill {
            self.entries.insert(i, e.clone());
        }
        let d = self.duration;
        self.entries.retain(|_, e| !expired(pkg.as_of, e.cached_round, d));
    }

    /// Whether the live part of this cache equals the live part of `global`
    /// at round `at`, labels and timestamps included.
    pub fn is_synchronized_with(&self, global: &GlobalCache, at: Round) -> bool {
        let d = self.duration;
        let local_live: BTreeMap<usize, &CacheEntry> = self
            .entries
            .iter()
            .filter(|(_, e)| !expired(at, e.cached_round, d))
            .map(|(i, e)| (*i, e))
            .collect();
        let global_live: BTreeMap<usize, &CacheEntry> = global.live_entries(at).collect();
        local_live == global_live
    }
}

/// Free-function form of [`GlobalCache::compute_request_list`].
pub fn compute_request_list(cache: &GlobalCache, round_indices: &[usize], current_round: Round) -> Vec<usize> {
    cache.compute_request_list(round_indices, current_round)
}

/// Free-function form of [`GlobalCache::update`].
pub fn update_global_cache(
    cache: &mut GlobalCache,
    round_indices: &[usize],
    assembled: &SoftLabelBatch,
    current_round: Round,
) -> Result<Vec<CacheSignal>> {
    cache.update(round_indices, assembled, current_round)
}

/// Free-function form of [`LocalCache::apply_update`].
pub fn update_local_cache(cache: &mut LocalCache, pkg: &RoundUpdatePackage) -> Result<SoftLabelBatch> {
    cache.apply_update(pkg)
}

/// Free-function form of [`GlobalCache::build_catch_up`].
pub fn build_catch_up(cache: &GlobalCache, last_participated: Option<Round>, current_round: Round) -> CatchUpPackage {
    cache.build_catch_up(last_participated, current_round)
}

/// Free-function form of [`LocalCache::apply_catch_up`].
pub fn apply_catch_up(cache: &mut LocalCache, pkg: &CatchUpPackage) {
    cache.apply_catch_up(pkg)
}
