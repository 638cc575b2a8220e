//! Slack-aware prefill scheduling: relative-slack computation, the
//! FCFS/EDF/LRS/ILRS policy family, adaptive chunk sizing against a target
//! batch time, and deadline-driven batch packing with prefill-prefill
//! batching (PPB).
//!
//! Scheduling only ever touches the prefill phase. A request that has
//! entered decode is batched unconditionally every step until it finishes.

use crate::costmodel::{
    quantize_chunk_down, DecodeLoad, PrefillPiece, RuntimePredictor, StepWork, CHUNK_QUANTUM,
};
use crate::error::{Result, SimError};
use serde::{Deserialize, Serialize};

/// Request lifecycle phase. Transitions move forward only, except that a
/// partially prefilled request returns to `Waiting` when its chunk completes
/// (the re-queue step); `Decoding` never goes backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Waiting,
    Prefilling,
    Decoding,
    Finished,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Waiting => "Waiting",
            Phase::Prefilling => "Prefilling",
            Phase::Decoding => "Decoding",
            Phase::Finished => "Finished",
        }
    }
}

/// One inference request's lifecycle state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub phase: Phase,
    pub prefill_done_tokens: u64,
    /// Absolute TTFT deadline: `arrival_time + deadline_duration`.
    pub deadline_ts: f64,
    pub deadline_duration: f64,
    /// KVP ranks holding this request's KV shards, oldest first.
    pub assigned_kvp_ranks: Vec<u32>,
    /// Resident KV tokens per assigned rank (parallel to the rank list).
    pub shard_tokens: Vec<u64>,
    pub first_token_ts: Option<f64>,
    /// Completion time of each decode token after the first.
    pub decode_token_ts: Vec<f64>,
    pub decode_done_tokens: u64,
}

impl Request {
    pub fn new(id: u64, arrival_time: f64, prefill_tokens: u64, decode_tokens: u64) -> Self {
        Self {
            id,
            arrival_time,
            prefill_tokens,
            decode_tokens,
            phase: Phase::Waiting,
            prefill_done_tokens: 0,
            deadline_ts: arrival_time,
            deadline_duration: 0.0,
            assigned_kvp_ranks: Vec::new(),
            shard_tokens: Vec::new(),
            first_token_ts: None,
            decode_token_ts: Vec::new(),
            decode_done_tokens: 0,
        }
    }

    pub fn set_deadline(&mut self, duration: f64) {
        self.deadline_duration = duration;
        self.deadline_ts = self.arrival_time + duration;
    }

    pub fn remaining_prefill(&self) -> u64 {
        self.prefill_tokens - self.prefill_done_tokens
    }

    /// Tokens resident in the KV cache: prefilled plus decoded so far.
    pub fn context_tokens(&self) -> u64 {
        self.prefill_done_tokens + self.decode_done_tokens
    }

    pub fn is_active(&self) -> bool {
        self.phase != Phase::Finished
    }

    /// Validated phase transition. Forward-only, except Prefilling->Waiting.
    pub fn transition(&mut self, to: Phase) -> Result<()> {
        use Phase::*;
        let ok = matches!(
            (self.phase, to),
            (Waiting, Prefilling)
                | (Prefilling, Waiting)
                | (Prefilling, Decoding)
                | (Prefilling, Finished)
                | (Decoding, Finished)
        ) || self.phase == to;
        if !ok {
            return Err(SimError::InvalidArgument(format!(
                "request {}: illegal phase transition {:?} -> {to:?}",
                self.id, self.phase
            )));
        }
        self.phase = to;
        Ok(())
    }
}

/// Prefill scheduling order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Fcfs,
    Edf,
    Lrs,
    Ilrs,
}

impl Policy {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "fcfs" => Ok(Policy::Fcfs),
            "edf" => Ok(Policy::Edf),
            "lrs" => Ok(Policy::Lrs),
            "ilrs" => Ok(Policy::Ilrs),
            other => Err(SimError::InvalidConfig(format!(
                "unknown policy '{other}' (expected fcfs|edf|lrs|ilrs)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Fcfs => "fcfs",
            Policy::Edf => "edf",
            Policy::Lrs => "lrs",
            Policy::Ilrs => "ilrs",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// SLO parameters driving deadlines and the packer's target batch time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SloSpec {
    /// Multiplier on the predicted isolated prefill time.
    pub ttft_slo_scale: f64,
    /// Lower bound on any TTFT deadline, seconds.
    pub ttft_slo_floor_s: f64,
    /// Target batch time, i.e. the decode latency objective, seconds.
    pub tpot_slo_s: f64,
    /// Cap on the token-budget fraction that PPB secondaries may take.
    pub max_sharing_fraction: f64,
}

impl SloSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ttft_slo_scale < 1.0 {
            return Err(SimError::InvalidConfig("ttft_slo_scale must be >= 1".into()));
        }
        if self.ttft_slo_floor_s < 0.0 {
            return Err(SimError::InvalidConfig("ttft_slo_floor_s must be >= 0".into()));
        }
        if self.tpot_slo_s <= 0.0 {
            return Err(SimError::InvalidConfig("tpot_slo_s must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.max_sharing_fraction) {
            return Err(SimError::InvalidConfig("max_sharing_fraction must be in [0,1]".into()));
        }
        Ok(())
    }

    /// TTFT deadline duration for a predicted isolated prefill time.
    pub fn deadline_duration(&self, isolated_prefill_s: f64) -> f64 {
        (self.ttft_slo_scale * isolated_prefill_s).max(self.ttft_slo_floor_s)
    }
}

impl Default for SloSpec {
    fn default() -> Self {
        Self {
            ttft_slo_scale: 5.0,
            ttft_slo_floor_s: 0.5,
            tpot_slo_s: 0.045,
            max_sharing_fraction: 0.3,
        }
    }
}

/// Supplies the isolated-run estimate for a request's remaining prefill.
/// The analytical predictor implements it; tests can stub it.
pub trait PrefillEstimator {
    fn remaining_prefill_seconds(&self, req: &Request) -> f64;
}

/// Analytical estimator: Eq.-4 closed form over fixed-size chunks.
pub struct IsolatedPrefillEstimator<'a> {
    pub predictor: &'a RuntimePredictor,
    pub chunk: u64,
}

impl PrefillEstimator for IsolatedPrefillEstimator<'_> {
    fn remaining_prefill_seconds(&self, req: &Request) -> f64 {
        self.predictor.isolated_prefill_seconds(
            req.prefill_done_tokens,
            req.remaining_prefill(),
            self.chunk,
        )
    }
}

/// Remaining absolute slack: time to deadline minus remaining prefill time.
pub fn absolute_slack(req: &Request, now: f64, est: &dyn PrefillEstimator) -> f64 {
    (req.deadline_ts - now) - est.remaining_prefill_seconds(req)
}

/// Relative slack per the ILRS rule:
/// `((deadline_ts - now) - remaining_prefill_time) / deadline_duration`.
///
/// The numerator's deadline term is the time remaining until the deadline
/// (`deadline_ts - now`), not the absolute timestamp; the raw formulation
/// would otherwise mix a timestamp with durations. May be negative once the
/// deadline is unachievable.
pub fn relative_slack(req: &Request, now: f64, est: &dyn PrefillEstimator) -> Result<f64> {
    if matches!(req.phase, Phase::Decoding | Phase::Finished) {
        return Err(SimError::WrongPhase { id: req.id, phase: req.phase.as_str() });
    }
    if req.deadline_duration <= 0.0 {
        return Err(SimError::InvalidArgument(format!(
            "request {} has no deadline duration",
            req.id
        )));
    }
    Ok(absolute_slack(req, now, est) / req.deadline_duration)
}

/// Stable policy sort of the waiting queue; ties always break by
/// `(arrival_time, id)`. Queued requests must still have prefill work.
pub fn prioritize(queue: &mut [&Request], policy: Policy, now: f64, est: &dyn PrefillEstimator) {
    let key = |req: &Request| -> f64 {
        match policy {
            Policy::Fcfs => req.arrival_time,
            Policy::Edf => req.deadline_ts,
            Policy::Lrs => absolute_slack(req, now, est),
            Policy::Ilrs => {
                let dur = req.deadline_duration.max(f64::MIN_POSITIVE);
                absolute_slack(req, now, est) / dur
            }
        }
    };
    queue.sort_by(|a, b| {
        key(a)
            .total_cmp(&key(b))
            .then(a.arrival_time.total_cmp(&b.arrival_time))
            .then(a.id.cmp(&b.id))
    });
}

/// How the packer sizes prefill chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    /// Shrink chunks as the KV cache grows to hold the target batch time.
    Adaptive,
    /// Fixed chunk size (baseline schedulers).
    Static(u64),
}

/// Packer limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackerConfig {
    /// Hard cap on tokens per batch (chunk tokens + decode tokens).
    pub token_budget: u64,
    /// Upper bound for any prefill chunk.
    pub max_chunk: u64,
    /// Fixed chunk size for baseline schedulers; adaptive when absent.
    pub static_chunk: Option<u64>,
    /// Accepted overshoot over the target batch time before a batch counts
    /// as oversize; floor-chunk quantization makes exact fits impossible.
    pub tolerance: f64,
}

impl PackerConfig {
    pub fn mode(&self) -> ChunkMode {
        match self.static_chunk {
            Some(c) => ChunkMode::Static(c),
            None => ChunkMode::Adaptive,
        }
    }
}

impl Default for PackerConfig {
    fn default() -> Self {
        Self { token_budget: 8192, max_chunk: 4096, static_chunk: None, tolerance: 0.10 }
    }
}

/// Largest quantized chunk for `req` whose predicted mixed-batch stage time
/// stays within `target_batch_time`, clamped below by the minimum efficient
/// chunk and above by the remaining prefill and the configured max chunk.
/// Returns the floor chunk when even the floor violates the target (the
/// packer admits and counts the overrun). Nonincreasing in
/// `prefill_done_tokens`, everything else fixed.
pub fn adapt_chunk_size(
    req: &Request,
    target_batch_time: f64,
    decode_load: DecodeLoad,
    predictor: &RuntimePredictor,
    packer: &PackerConfig,
) -> u64 {
    let remaining = req.remaining_prefill();
    if remaining == 0 {
        return 0;
    }
    let upper = remaining.min(packer.max_chunk);
    let floor = predictor.min_efficient_chunk().min(upper);
    let time_for = |c: u64| -> f64 {
        let work = StepWork {
            prefill: vec![PrefillPiece { kv_len_before: req.prefill_done_tokens, chunk: c }],
            decode: decode_load,
        };
        predictor.step_estimate(&work).seconds
    };
    if time_for(floor) > target_batch_time {
        return floor;
    }
    if time_for(upper) <= target_batch_time {
        return upper;
    }
    // Largest quantized c in [floor, upper] under the target; stage time is
    // monotone in c, so binary search on the quantum grid.
    let mut lo = floor / CHUNK_QUANTUM; // feasible
    let mut hi = upper / CHUNK_QUANTUM; // infeasible (upper checked above)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if time_for(mid * CHUNK_QUANTUM) <= target_batch_time {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * CHUNK_QUANTUM).clamp(floor, upper)
}

/// One packed batch: all decoding requests plus prefill chunks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchPlan {
    pub decode_request_ids: Vec<u64>,
    /// `(request_id, chunk_tokens)`, head-of-queue first.
    pub prefill_entries: Vec<(u64, u64)>,
    pub token_budget: u64,
    pub predicted_step_time: f64,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.decode_request_ids.is_empty() && self.prefill_entries.is_empty()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefill_entries.iter().map(|(_, c)| *c).sum()
    }
}

/// Packs the next batch:
/// 1. every decoding request is included unconditionally;
/// 2. the head-of-queue prefill receives a chunk via [`adapt_chunk_size`]
///    (or the configured static size);
/// 3. prefill-prefill batching: when the head chunk sits at or below the
///    efficiency floor and the predicted step still has headroom below the
///    target batch time, further queued prefills receive token shares
///    proportional to `1 - relative_slack` (more tokens to less slack),
///    capped at `max_sharing_fraction` of the token budget and trimmed
///    until the prediction fits `target * (1 + tolerance)`;
/// 4. the resulting prediction is recorded on the plan.
pub fn pack_batch(
    ordered_queue: &[&Request],
    decoding: &[&Request],
    slo: &SloSpec,
    now: f64,
    predictor: &RuntimePredictor,
    packer: &PackerConfig,
    est: &dyn PrefillEstimator,
) -> BatchPlan {
    let target = slo.tpot_slo_s;
    let mut decode_ids: Vec<u64> = decoding.iter().map(|r| r.id).collect();
    decode_ids.sort_unstable();
    let decode_load = DecodeLoad {
        tokens: decoding.len() as u64,
        context_tokens: decoding.iter().map(|r| r.context_tokens()).sum(),
    };

    let mut plan = BatchPlan {
        decode_request_ids: decode_ids,
        prefill_entries: Vec::new(),
        token_budget: packer.token_budget,
        predicted_step_time: 0.0,
    };
    let mut budget_left = packer.token_budget.saturating_sub(decode_load.tokens);

    let predict = |entries: &[(&Request, u64)]| -> f64 {
        let work = StepWork {
            prefill: entries
                .iter()
                .map(|(r, c)| PrefillPiece { kv_len_before: r.prefill_done_tokens, chunk: *c })
                .collect(),
            decode: decode_load,
        };
        predictor.step_estimate(&work).seconds
    };

    let head = ordered_queue.iter().find(|r| r.remaining_prefill() > 0);
    let Some(head) = head else {
        if decode_load.tokens > 0 {
            plan.predicted_step_time = predict(&[]);
        }
        return plan;
    };

    let head_chunk = match packer.mode() {
        ChunkMode::Adaptive => adapt_chunk_size(head, target, decode_load, predictor, packer),
        ChunkMode::Static(c) => c.max(1).min(head.remaining_prefill()),
    }
    .min(budget_left);
    if head_chunk == 0 {
        if decode_load.tokens > 0 {
            plan.predicted_step_time = predict(&[]);
        }
        return plan;
    }
    budget_left -= head_chunk;
    let mut entries: Vec<(&Request, u64)> = vec![(head, head_chunk)];
    let head_time = predict(&entries);

    let floor = predictor.min_efficient_chunk();
    let ppb_eligible =
        slo.max_sharing_fraction > 0.0 && head_chunk <= floor && head_time < target;
    if ppb_eligible {
        let pool_cap = ((slo.max_sharing_fraction * packer.token_budget as f64) as u64)
            .min(budget_left);
        let candidates: Vec<&Request> = ordered_queue
            .iter()
            .filter(|r| r.id != head.id && r.remaining_prefill() > 0)
            .copied()
            .collect();
        if pool_cap >= CHUNK_QUANTUM && !candidates.is_empty() {
            // More tokens to requests with less slack.
            let weights: Vec<f64> = candidates
                .iter()
                .map(|r| {
                    let w = relative_slack(r, now, est).map(|s| 1.0 - s).unwrap_or(1.0);
                    w.clamp(0.0, 1.0)
                })
                .collect();
            let total_w: f64 = weights.iter().sum();
            let mut pool_left = pool_cap;
            for (req, w) in candidates.iter().zip(&weights) {
                if pool_left < CHUNK_QUANTUM {
                    break;
                }
                let frac =
                    if total_w > 0.0 { w / total_w } else { 1.0 / candidates.len() as f64 };
                let raw = (pool_cap as f64 * frac) as u64;
                if raw < CHUNK_QUANTUM {
                    continue;
                }
                let share = quantize_chunk_down(raw.min(pool_left))
                    .min(req.remaining_prefill())
                    .min(pool_left);
                if share == 0 {
                    continue;
                }
                entries.push((req, share));
                pool_left -= share;
            }
            // Trim from the lowest-priority end until the prediction fits.
            let limit = target * (1.0 + packer.tolerance);
            while entries.len() > 1 && predict(&entries) > limit {
                let last = entries.last_mut().unwrap();
                if last.1 > CHUNK_QUANTUM {
                    last.1 = quantize_chunk_down(last.1 - CHUNK_QUANTUM);
                } else {
                    entries.pop();
                }
            }
        }
    }

    plan.predicted_step_time = predict(&entries);
    plan.prefill_entries = entries.iter().map(|(r, c)| (r.id, *c)).collect();
    plan
}
