//! Just-in-time KVP load balancing: request placement across KVP ranks and
//! dynamic worker growth once a rank's KV residency hits its token limit.

use crate::error::{Result, SimError};
use crate::scheduler::Request;
use serde::{Deserialize, Serialize};

/// Load state of one KVP rank (a full TPxSPP device group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvpRankState {
    pub rank: u32,
    /// KV tokens resident across all requests sharded onto this rank.
    pub resident_kv_tokens: u64,
    /// Predictor estimate of queued prefill work routed here, seconds.
    pub pending_prefill_time: f64,
    /// Aggregate KV token capacity derived from the memory headroom.
    pub token_limit: u64,
}

impl KvpRankState {
    pub fn new(rank: u32, token_limit: u64) -> Self {
        Self { rank, resident_kv_tokens: 0, pending_prefill_time: 0.0, token_limit }
    }

    pub fn has_capacity(&self) -> bool {
        self.resident_kv_tokens < self.token_limit
    }
}

/// Picks the rank for a newly admitted request: least pending prefill work,
/// then least resident KV, then lowest rank id. Errors when no rank has
/// capacity, in which case the request stays queued at admission.
pub fn assign_request(req: &Request, ranks: &[KvpRankState]) -> Result<u32> {
    ranks
        .iter()
        .filter(|r| r.has_capacity())
        .min_by(|a, b| {
            a.pending_prefill_time
                .total_cmp(&b.pending_prefill_time)
                .then(a.resident_kv_tokens.cmp(&b.resident_kv_tokens))
                .then(a.rank.cmp(&b.rank))
        })
        .map(|r| r.rank)
        .ok_or(SimError::NoRankCapacity(req.id))
}

/// Result of a worker-growth check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Growth {
    Unchanged,
    Grew(u32),
    /// Growth was needed but no rank is available; residency overruns and
    /// the caller increments its deferral counter.
    Deferred,
}

/// Grows a request's worker set when its newest rank has exhausted the
/// per-rank aggregate token limit: the least-loaded rank not already serving
/// the request is appended. The set only ever grows while the request is
/// active. Checks run at chunk boundaries.
pub fn maybe_grow_workers(req: &mut Request, ranks: &[KvpRankState]) -> Growth {
    let Some(&newest) = req.assigned_kvp_ranks.last() else {
        return Growth::Unchanged;
    };
    let newest_state = ranks.iter().find(|r| r.rank == newest);
    let exhausted = match newest_state {
        Some(state) => state.resident_kv_tokens >= state.token_limit,
        None => false,
    };
    if !exhausted {
        return Growth::Unchanged;
    }
    let candidate = ranks
        .iter()
        .filter(|r| !req.assigned_kvp_ranks.contains(&r.rank) && r.has_capacity())
        .min_by(|a, b| {
            a.resident_kv_tokens
                .cmp(&b.resident_kv_tokens)
                .then(a.pending_prefill_time.total_cmp(&b.pending_prefill_time))
                .then(a.rank.cmp(&b.rank))
        });
    match candidate {
        Some(rank) => {
            req.assigned_kvp_ranks.push(rank.rank);
            req.shard_tokens.push(0);
            Growth::Grew(rank.rank)
        }
        None => Growth::Deferred,
    }
}

/// Per-rank aggregate token limit from the per-device memory headroom of one
/// rank group, divided by the configured max concurrent long requests.
pub fn rank_token_limit(
    headroom_bytes_per_device: f64,
    kv_bytes_per_token: f64,
    devices_per_rank: u64,
    max_concurrent_long: u64,
) -> u64 {
    if headroom_bytes_per_device <= 0.0 || kv_bytes_per_token <= 0.0 {
        return 0;
    }
    let rank_bytes = headroom_bytes_per_device * devices_per_rank as f64;
    (rank_bytes / kv_bytes_per_token / max_concurrent_long.max(1) as f64) as u64
}
