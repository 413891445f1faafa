//! Per-round byte accounting.
//!
//! Every count is derived from message sizes under an [`EncodingModel`]; no
//! payload is actually serialized. The one-time distribution of the public
//! pool is not charged.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cache::Round;
use crate::error::Result;

/// Wire size of each message element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingModel {
    pub bytes_per_prob: u64,
    pub bytes_per_index: u64,
    pub bytes_per_signal: u64,
}

impl Default for EncodingModel {
    /// `f32` probabilities, `u64` indices, one byte per signal.
    fn default() -> Self {
        EncodingModel {
            bytes_per_prob: 4,
            bytes_per_index: 8,
            bytes_per_signal: 1,
        }
    }
}

impl EncodingModel {
    /// One indexed soft-label: `N` probabilities plus its sample index.
    pub fn label_bytes(&self, num_classes: usize) -> u64 {
        num_classes as u64 * self.bytes_per_prob + self.bytes_per_index
    }
}

/// Bytes moved in one round, split by message kind. The four downlink parts
/// sum to `downlink_bytes`, the two uplink parts to `uplink_bytes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoundCost {
    pub round: Round,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub uplink_softlabel_bytes: u64,
    pub uplink_index_bytes: u64,
    pub downlink_softlabel_bytes: u64,
    pub downlink_index_bytes: u64,
    pub downlink_signal_bytes: u64,
    pub downlink_catchup_bytes: u64,
}

/// Message counts of one round, as seen by the ledger.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoundTraffic {
    pub round: Round,
    pub num_classes: usize,
    /// Clients that took part in the round.
    pub participants: usize,
    /// Samples each participant computed and uploaded (`|I_req^t|`).
    pub requested: usize,
    /// Fresh labels in the broadcast update package.
    pub fresh_count: usize,
    /// Cache signals in the broadcast update package.
    pub signal_count: usize,
    /// Backfill entries per stale participant.
    pub catch_up_entries: Vec<usize>,
}

/// `num_clients × requested × (N · bytes_per_prob + bytes_per_index)`.
pub fn cost_uplink(num_clients: usize, requested: usize, num_classes: usize, enc: &EncodingModel) -> u64 {
    num_clients as u64 * requested as u64 * enc.label_bytes(num_classes)
}

/// Every participant receives the request list, the fresh labels and the
/// signals; stale participants additionally receive their backfill.
pub fn cost_downlink(
    num_clients: usize,
    request_list_len: usize,
    fresh_count: usize,
    signal_count: usize,
    catch_up_entries_per_client: &[usize],
    num_classes: usize,
    enc: &EncodingModel,
) -> u64 {
    let per_client = request_list_len as u64 * enc.bytes_per_index
        + fresh_count as u64 * enc.label_bytes(num_classes)
        + signal_count as u64 * enc.bytes_per_signal;
    let catch_up: u64 =
        catch_up_entries_per_client.iter().map(|&n| n as u64).sum::<u64>() * enc.label_bytes(num_classes);
    num_clients as u64 * per_client + catch_up
}

impl RoundCost {
    pub fn from_traffic(t: &RoundTraffic, enc: &EncodingModel) -> Self {
        let clients = t.participants as u64;
        let n = t.num_classes as u64;
        let uplink_softlabel_bytes = clients * t.requested as u64 * n * enc.bytes_per_prob;
        let uplink_index_bytes = clients * t.requested as u64 * enc.bytes_per_index;
        let downlink_softlabel_bytes = clients * t.fresh_count as u64 * n * enc.bytes_per_prob;
        let downlink_index_bytes = clients * (t.requested + t.fresh_count) as u64 * enc.bytes_per_index;
        let downlink_signal_bytes = clients * t.signal_count as u64 * enc.bytes_per_signal;
        let downlink_catchup_bytes =
            t.catch_up_entries.iter().map(|&e| e as u64).sum::<u64>() * enc.label_bytes(t.num_classes);
        let cost = RoundCost {
            round: t.round,
            uplink_bytes: uplink_softlabel_bytes + uplink_index_bytes,
            downlink_bytes: downlink_softlabel_bytes
                + downlink_index_bytes
                + downlink_signal_bytes
                + downlink_catchup_bytes,
            uplink_softlabel_bytes,
            uplink_index_bytes,
            downlink_softlabel_bytes,
            downlink_index_bytes,
            downlink_signal_bytes,
            downlink_catchup_bytes,
        };
        debug_assert_eq!(
            cost.uplink_bytes,
            cost_uplink(t.participants, t.requested, t.num_classes, enc)
        );
        debug_assert_eq!(
            cost.downlink_bytes,
            cost_downlink(
                t.participants,
                t.requested,
                t.fresh_count,
                t.signal_count,
                &t.catch_up_entries,
                t.num_classes,
                enc
            )
        );
        cost
    }
}

/// Running totals after each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CumulativeCost {
    pub round: Round,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

pub fn cumulative(costs: &[RoundCost]) -> Vec<CumulativeCost> {
    let mut acc = CumulativeCost::default();
    costs
        .iter()
        .map(|c| {
            acc.round = c.round;
            acc.uplink_bytes += c.uplink_bytes;
            acc.downlink_bytes += c.downlink_bytes;
            acc
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct CsvRow {
    round: Round,
    uplink_bytes: u64,
    downlink_bytes: u64,
    uplink_softlabel_bytes: u64,
    uplink_index_bytes: u64,
    downlink_softlabel_bytes: u64,
    downlink_index_bytes: u64,
    downlink_signal_bytes: u64,
    downlink_catchup_bytes: u64,
    cache_hit_ratio: f64,
}

/// Append-only record of every round's cost and cache hit ratio.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    encoding: EncodingModel,
    costs: Vec<RoundCost>,
    hit_ratios: Vec<f64>,
}

impl CommLedger {
    pub fn new(encoding: EncodingModel) -> Self {
        CommLedger {
            encoding,
            costs: Vec::new(),
            hit_ratios: Vec::new(),
        }
    }

    pub fn encoding(&self) -> &EncodingModel {
        &self.encoding
    }

    pub fn record(&mut self, traffic: &RoundTraffic, cache_hit_ratio: f64) -> RoundCost {
        let cost = RoundCost::from_traffic(traffic, &self.encoding);
        self.costs.push(cost);
        self.hit_ratios.push(cache_hit_ratio);
        cost
    }

    pub fn costs(&self) -> &[RoundCost] {
        &self.costs
    }

    pub fn hit_ratios(&self) -> &[f64] {
        &self.hit_ratios
    }

    pub fn totals(&self) -> CumulativeCost {
        cumulative(&self.costs).last().copied().unwrap_or_default()
    }

    /// Columns: round, uplink_bytes, downlink_bytes, uplink_softlabel_bytes,
    /// uplink_index_bytes, downlink_softlabel_bytes, downlink_index_bytes,
    /// downlink_signal_bytes, downlink_catchup_bytes, cache_hit_ratio.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (c, &h) in self.costs.iter().zip(&self.hit_ratios) {
            w.serialize(CsvRow {
                round: c.round,
                uplink_bytes: c.uplink_bytes,
                downlink_bytes: c.downlink_bytes,
                uplink_softlabel_bytes: c.uplink_softlabel_bytes,
                uplink_index_bytes: c.uplink_index_bytes,
                downlink_softlabel_bytes: c.downlink_softlabel_bytes,
                downlink_index_bytes: c.downlink_index_bytes,
                downlink_signal_bytes: c.downlink_signal_bytes,
                downlink_catchup_bytes: c.downlink_catchup_bytes,
                cache_hit_ratio: h,
            })?;
        }
        if self.costs.is_empty() {
            w.write_record([
                "round",
                "uplink_bytes",
                "downlink_bytes",
                "uplink_softlabel_bytes",
                "uplink_index_bytes",
                "downlink_softlabel_bytes",
                "downlink_index_bytes",
                "downlink_signal_bytes",
                "downlink_catchup_bytes",
                "cache_hit_ratio",
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
