//! Result summarization and report files: nearest-rank percentiles, the
//! per-request CSV, metrics JSON, sweep execution, and optional CDF/plot
//! emission.

use crate::config::{Experiment, ExperimentConfig, SweepSpec, TraceSourceKind};
use crate::error::{Result, SimError};
use crate::scheduler::Policy;
use crate::simulator::{run, run_baseline_pools, SimMetrics};
use crate::workload::{generate_trace, load_trace, TraceEntry};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

/// Nearest-rank percentile: the smallest element with cumulative rank
/// >= q. The P50 of a single sample is that sample.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (q / 100.0 * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Aggregate view of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: u64,
    pub finished: u64,
    pub censored: u64,
    pub ttft_p50_s: Option<f64>,
    pub ttft_p90_s: Option<f64>,
    pub ttft_p99_s: Option<f64>,
    pub tpot_p50_s: Option<f64>,
    pub tpot_p90_s: Option<f64>,
    pub tpot_p99_s: Option<f64>,
    pub mfu: f64,
    pub mbu: f64,
    pub slo_violations: u64,
    pub batch_time_overruns: u64,
    pub prefill_requeues: u64,
    pub elapsed_s: f64,
    pub steps: u64,
}

pub fn summarize(metrics: &SimMetrics) -> Summary {
    let ttft = metrics.ttft_values();
    let tpot = metrics.tpot_values();
    Summary {
        requests: metrics.requests.len() as u64,
        finished: metrics.finished_count() as u64,
        censored: metrics.censored,
        ttft_p50_s: percentile(&ttft, 50.0),
        ttft_p90_s: percentile(&ttft, 90.0),
        ttft_p99_s: percentile(&ttft, 99.0),
        tpot_p50_s: percentile(&tpot, 50.0),
        tpot_p90_s: percentile(&tpot, 90.0),
        tpot_p99_s: percentile(&tpot, 99.0),
        mfu: metrics.mfu,
        mbu: metrics.mbu,
        slo_violations: metrics.slo_violations,
        batch_time_overruns: metrics.batch_time_overruns,
        prefill_requeues: metrics.prefill_requeues,
        elapsed_s: metrics.elapsed_s,
        steps: metrics.steps,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

/// Human-readable summary table.
pub fn render_summary(summary: &Summary) -> String {
    let mut out = String::new();
    let row = |out: &mut String, k: &str, v: String| {
        let _ = writeln!(out, "  {k:<22} {v}");
    };
    let _ = writeln!(out, "summary:");
    row(&mut out, "requests", summary.requests.to_string());
    row(&mut out, "finished", summary.finished.to_string());
    row(&mut out, "censored", summary.censored.to_string());
    row(&mut out, "ttft_p50_s", fmt_opt(summary.ttft_p50_s));
    row(&mut out, "ttft_p90_s", fmt_opt(summary.ttft_p90_s));
    row(&mut out, "ttft_p99_s", fmt_opt(summary.ttft_p99_s));
    row(&mut out, "tpot_p50_s", fmt_opt(summary.tpot_p50_s));
    row(&mut out, "tpot_p90_s", fmt_opt(summary.tpot_p90_s));
    row(&mut out, "tpot_p99_s", fmt_opt(summary.tpot_p99_s));
    row(&mut out, "mfu", format!("{:.4}", summary.mfu));
    row(&mut out, "mbu", format!("{:.4}", summary.mbu));
    row(&mut out, "slo_violations", summary.slo_violations.to_string());
    row(&mut out, "batch_time_overruns", summary.batch_time_overruns.to_string());
    row(&mut out, "prefill_requeues", summary.prefill_requeues.to_string());
    row(&mut out, "elapsed_s", format!("{:.6}", summary.elapsed_s));
    row(&mut out, "steps", summary.steps.to_string());
    out
}

/// Stable per-request CSV schema.
pub const REQUEST_CSV_HEADER: &str =
    "id,arrival_s,prefill_tokens,decode_tokens,ttft_s,tpot_p50_s,tpot_p95_s,finished";

/// Writes the per-request CSV (`,` delimiter, `.` decimal, UTF-8).
pub fn write_requests_csv<W: std::io::Write>(mut out: W, metrics: &SimMetrics) -> Result<()> {
    writeln!(out, "{REQUEST_CSV_HEADER}")?;
    for req in &metrics.requests {
        let id = req.label.clone().unwrap_or_else(|| req.id.to_string());
        let tpot_p50 = percentile(&req.tpot_samples_s, 50.0);
        let tpot_p95 = percentile(&req.tpot_samples_s, 95.0);
        writeln!(
            out,
            "{id},{:.6},{},{},{},{},{},{}",
            req.arrival_s,
            req.prefill_tokens,
            req.decode_tokens,
            fmt_opt(req.ttft_s),
            fmt_opt(tpot_p50),
            fmt_opt(tpot_p95),
            req.finished
        )?;
    }
    Ok(())
}

pub fn write_metrics_json(path: &Path, metrics: &SimMetrics) -> Result<()> {
    let json = serde_json::to_string_pretty(metrics)
        .map_err(|e| SimError::InvalidArgument(format!("serialize metrics: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// CDF data file: `value,cumulative_fraction` rows for one metric.
pub fn write_cdf_csv<W: std::io::Write>(mut out: W, name: &str, values: &[f64]) -> Result<()> {
    writeln!(out, "{name},cumulative_fraction")?;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len().max(1) as f64;
    for (i, v) in sorted.iter().enumerate() {
        writeln!(out, "{v:.6},{:.6}", (i + 1) as f64 / n)?;
    }
    Ok(())
}

/// Minimal self-contained SVG CDF chart (log-x polyline).
pub fn render_cdf_svg(title: &str, values: &[f64]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\"><rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>",
        w / 2.0
    );
    if !sorted.is_empty() {
        let lo = sorted.first().unwrap().ln();
        let hi = sorted.last().unwrap().ln().max(lo + 1e-9);
        let n = sorted.len() as f64;
        let mut points = String::new();
        for (i, v) in sorted.iter().enumerate() {
            let x = pad + (v.ln() - lo) / (hi - lo) * (w - 2.0 * pad);
            let y = h - pad - ((i + 1) as f64 / n) * (h - 2.0 * pad);
            let _ = write!(points, "{x:.1},{y:.1} ");
        }
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>",
            points.trim_end()
        );
    }
    let _ = write!(
        svg,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/></svg>",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    svg
}

/// One sweep cell: the base experiment with axis overrides applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub qps: Option<f64>,
    pub policy: Option<String>,
    pub chunk: Option<u64>,
    pub p_spp: Option<u64>,
    pub p_kvp: Option<u64>,
    pub context: Option<u64>,
}

impl SweepCell {
    fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.qps {
            parts.push(format!("qps={v}"));
        }
        if let Some(v) = &self.policy {
            parts.push(format!("policy={v}"));
        }
        if let Some(v) = self.chunk {
            parts.push(format!("chunk={v}"));
        }
        if let Some(v) = self.p_spp {
            parts.push(format!("p_spp={v}"));
        }
        if let Some(v) = self.p_kvp {
            parts.push(format!("p_kvp={v}"));
        }
        if let Some(v) = self.context {
            parts.push(format!("context={v}"));
        }
        parts.join(",")
    }
}

/// Cartesian product of the configured axes, in deterministic order.
pub fn sweep_cells(spec: &SweepSpec) -> Vec<SweepCell> {
    fn axis<T: Clone>(v: &Option<Vec<T>>) -> Vec<Option<T>> {
        match v {
            Some(list) if !list.is_empty() => list.iter().cloned().map(Some).collect(),
            _ => vec![None],
        }
    }
    let mut cells = Vec::new();
    for qps in axis(&spec.qps) {
        for policy in axis(&spec.policy) {
            for chunk in axis(&spec.chunk) {
                for p_spp in axis(&spec.p_spp) {
                    for p_kvp in axis(&spec.p_kvp) {
                        for context in axis(&spec.context) {
                            cells.push(SweepCell {
                                qps,
                                policy: policy.clone(),
                                chunk,
                                p_spp,
                                p_kvp,
                                context: context.to_owned(),
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

/// Result of one sweep cell; infeasible placements are recorded, not fatal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub infeasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
}

pub const SWEEP_CSV_HEADER: &str = "cell,infeasible,requests,finished,ttft_p50_s,ttft_p90_s,\
                                    ttft_p99_s,tpot_p50_s,tpot_p90_s,tpot_p99_s,mfu,mbu,\
                                    slo_violations,elapsed_s";

pub fn write_sweep_csv<W: std::io::Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for row in rows {
        match &row.summary {
            Some(s) => writeln!(
                out,
                "\"{}\",{},{},{},{},{},{},{},{},{},{:.4},{:.4},{},{:.6}",
                row.cell.label(),
                row.infeasible,
                s.requests,
                s.finished,
                fmt_opt(s.ttft_p50_s),
                fmt_opt(s.ttft_p90_s),
                fmt_opt(s.ttft_p99_s),
                fmt_opt(s.tpot_p50_s),
                fmt_opt(s.tpot_p90_s),
                fmt_opt(s.tpot_p99_s),
                s.mfu,
                s.mbu,
                s.slo_violations,
                s.elapsed_s
            )?,
            None => writeln!(
                out,
                "\"{}\",{},,,,,,,,,,,,",
                row.cell.label(),
                row.infeasible
            )?,
        }
    }
    Ok(())
}

/// Materializes the trace for a run (generated, loaded, or a single
/// synthetic long request when a sweep `context` axis is active).
pub fn materialize_trace(cfg: &ExperimentConfig, context: Option<u64>) -> Result<Vec<TraceEntry>> {
    if let Some(n) = context {
        return Ok(vec![TraceEntry {
            arrival_s: 0.0,
            prefill_tokens: n,
            decode_tokens: 32,
            id: Some(format!("ctx{n}")),
        }]);
    }
    match cfg.trace.source {
        TraceSourceKind::Generate => generate_trace(&cfg.trace.spec),
        TraceSourceKind::File => {
            let path = cfg.trace.path.as_ref().ok_or_else(|| {
                SimError::InvalidConfig("trace.source = \"file\" requires trace.path".into())
            })?;
            Ok(load_trace(path)?.entries)
        }
    }
}

fn apply_cell(base: &ExperimentConfig, cell: &SweepCell) -> Result<(ExperimentConfig, Option<u64>)> {
    let mut cfg = base.clone();
    if let Some(qps) = cell.qps {
        cfg.trace.spec.qps = qps;
    }
    if let Some(policy) = &cell.policy {
        cfg.policy = Policy::parse(policy)?;
    }
    if let Some(chunk) = cell.chunk {
        cfg.packer.static_chunk = Some(chunk);
    }
    if let Some(p) = cell.p_spp {
        cfg.parallelism.p_spp = p;
    }
    if let Some(p) = cell.p_kvp {
        cfg.parallelism.p_kvp = p;
    }
    Ok((cfg, cell.context))
}

/// Runs every cell of the sweep; cells execute concurrently up to `jobs`
/// threads but rows come back in deterministic product order.
pub fn run_sweep(base: &ExperimentConfig, spec: &SweepSpec, jobs: usize) -> Result<Vec<SweepRow>> {
    let cells = sweep_cells(spec);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SimError::InvalidConfig(format!("thread pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let one = || -> Result<Summary> {
                    let (cfg, context) = apply_cell(base, cell)?;
                    let exp = cfg.resolve()?;
                    let trace = materialize_trace(&cfg, context)?;
                    let metrics = run_one(&trace, &exp, cfg.pools.as_ref())?;
                    Ok(summarize(&metrics))
                };
                match one() {
                    Ok(summary) => SweepRow {
                        cell: cell.clone(),
                        infeasible: false,
                        error: None,
                        summary: Some(summary),
                    },
                    Err(SimError::InfeasibleParallelism(msg)) => SweepRow {
                        cell: cell.clone(),
                        infeasible: true,
                        error: Some(msg),
                        summary: None,
                    },
                    Err(e) => SweepRow {
                        cell: cell.clone(),
                        infeasible: false,
                        error: Some(e.to_string()),
                        summary: None,
                    },
                }
            })
            .collect()
    });
    Ok(rows)
}

/// Dispatches to the unified scheduler or the static-pool baseline.
pub fn run_one(
    trace: &[TraceEntry],
    exp: &Experiment,
    pools: Option<&crate::config::PoolSplit>,
) -> Result<SimMetrics> {
    match pools {
        Some(split) => run_baseline_pools(trace, exp, split),
        None => run(trace, exp),
    }
}
