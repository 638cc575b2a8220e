//! Closed-form and schedule-level timing for sequence pipeline parallelism
//! (SPP), KV-cache parallelism (KVP), and memory feasibility of a 3D
//! parallel placement.
//!
//! SPP admits chunk `i+1` into the first pipeline stage the moment chunk `i`
//! leaves it; successive chunks of one request overlap across stages. Chunk
//! order within a stage is a data dependency, not a scheduling choice: chunk
//! `i+1`'s attention at stage `s` reads KV that only exists once chunk `i`
//! has passed stage `s`.

use crate::costmodel::{kv_cache_bytes, HardwareProfile, ModelConfig, ParallelismConfig};
use crate::error::{Result, SimError};

/// Occupancy of one (chunk, stage) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageWindow {
    pub start: f64,
    pub end: f64,
}

/// Earliest-start SPP schedule: `windows[chunk][stage]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSchedule {
    pub windows: Vec<Vec<StageWindow>>,
    pub comm: f64,
}

impl PipelineSchedule {
    pub fn chunks(&self) -> usize {
        self.windows.len()
    }

    pub fn stages(&self) -> usize {
        self.windows.first().map(|row| row.len()).unwrap_or(0)
    }

    pub fn makespan(&self) -> f64 {
        self.windows
            .iter()
            .filter_map(|row| row.last())
            .fold(0.0f64, |acc, w| acc.max(w.end))
    }
}

/// Builds the earliest-start SPP schedule for a rectangular table of
/// per-chunk per-stage times, with `comm` seconds between consecutive
/// stages. Deterministic; errors on an empty or ragged table and on
/// negative entries.
pub fn build_spp_schedule(chunk_stage_times: &[Vec<f64>], comm: f64) -> Result<PipelineSchedule> {
    let chunks = chunk_stage_times.len();
    let stages = chunk_stage_times.first().map(|row| row.len()).unwrap_or(0);
    if chunks == 0 || stages == 0 {
        return Err(SimError::EmptyInput("schedule needs >= 1 chunk and >= 1 stage".into()));
    }
    for (i, row) in chunk_stage_times.iter().enumerate() {
        if row.len() != stages {
            return Err(SimError::DimensionMismatch(format!(
                "chunk {i} has {} stage times, expected {stages}",
                row.len()
            )));
        }
        if row.iter().any(|t| *t < 0.0) || comm < 0.0 {
            return Err(SimError::InvalidArgument("stage times and comm must be >= 0".into()));
        }
    }

    let mut windows = vec![vec![StageWindow { start: 0.0, end: 0.0 }; stages]; chunks];
    for i in 0..chunks {
        for s in 0..stages {
            let after_prev_stage = if s > 0 { windows[i][s - 1].end + comm } else { 0.0 };
            let after_prev_chunk = if i > 0 { windows[i - 1][s].end } else { 0.0 };
            let start = after_prev_stage.max(after_prev_chunk);
            windows[i][s] = StageWindow { start, end: start + chunk_stage_times[i][s] };
        }
    }
    Ok(PipelineSchedule { windows, comm })
}

/// Eq.-4 closed-form SPP prefill estimate for `n` tokens in chunks of `c`:
/// `sum_i chunk_time(i) / p_spp + comm * ceil(n/c)`, where `chunk_time(i)`
/// is the whole-model (all stages) time of the 1-based `i`-th chunk and
/// `comm` is the per-chunk inter-stage transfer time.
///
/// The exact makespan is available from [`build_spp_schedule`]; in the
/// pipelined regime (many more chunks than stages) the two agree to within
/// one stage's busy time plus the total comm.
pub fn spp_prefill_time<F>(n: u64, c: u64, chunk_time: F, comm: f64, p_spp: u64) -> Result<f64>
where
    F: Fn(u64) -> f64,
{
    if c == 0 || n < c {
        return Err(SimError::InvalidArgument(format!("need n >= c >= 1, got n={n} c={c}")));
    }
    if p_spp == 0 {
        return Err(SimError::InvalidArgument("p_spp must be >= 1".into()));
    }
    let chunks = n.div_ceil(c);
    let total: f64 = (1..=chunks).map(&chunk_time).sum();
    Ok(total / p_spp as f64 + comm * chunks as f64)
}

/// Eq.-5 KVP decode time: attention scan parallelized across `p_kvp` ranks,
/// the rest of the step replicated, plus a communication term that depends
/// only on the query tokens — never on the context length (which enters
/// solely through `attn_time` and `total_time`).
pub fn kvp_decode_time(
    _context_tokens: u64,
    attn_time: f64,
    total_time: f64,
    p_kvp: u64,
    comm: f64,
) -> Result<f64> {
    if p_kvp == 0 {
        return Err(SimError::InvalidArgument("p_kvp must be >= 1".into()));
    }
    if attn_time < 0.0 || attn_time > total_time {
        return Err(SimError::InvalidArgument(format!(
            "need 0 <= attn_time <= total_time, got {attn_time} / {total_time}"
        )));
    }
    Ok(attn_time / p_kvp as f64 + (total_time - attn_time) + comm)
}

/// Eq.-6 KVP time for the `i`-th prefill chunk; same shape as decode with
/// per-chunk quantities and a chunk-size-dependent comm term.
pub fn kvp_chunk_time(
    _chunk_index: u64,
    _c: u64,
    attn_time: f64,
    total_time: f64,
    p_kvp: u64,
    comm: f64,
) -> Result<f64> {
    kvp_decode_time(0, attn_time, total_time, p_kvp, comm)
}

/// Outcome of a placement memory check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryCheck {
    pub feasible: bool,
    /// Per-device bytes to spare; negative when infeasible.
    pub headroom_bytes: f64,
}

/// Whether `max_context` tokens fit: per-device weight share (split across
/// `p_tp * p_spp`, replicated per KVP rank) plus the KV-cache share (split
/// across all three axes) plus the activation reserve, against per-device
/// capacity.
pub fn memory_feasible(
    max_context: u64,
    model: &ModelConfig,
    hw: &HardwareProfile,
    par: &ParallelismConfig,
    weight_bytes: f64,
) -> MemoryCheck {
    let weight_share = weight_bytes / (par.p_tp * par.p_spp) as f64;
    let kv_share = kv_cache_bytes(max_context, model) / par.devices() as f64;
    let used = weight_share + kv_share + hw.activation_reserve_bytes;
    let headroom = hw.mem_capacity - used;
    MemoryCheck { feasible: headroom >= 0.0, headroom_bytes: headroom }
}
