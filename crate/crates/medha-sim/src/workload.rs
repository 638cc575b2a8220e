//! Workload construction: Poisson arrivals with a heavy-tailed mix of short
//! conversational requests and long-context requests, plus JSONL trace
//! ingestion.
//!
//! Long request sizes follow a lognormal law fitted analytically to the two
//! published quantiles (P50/P90); short requests default to a lognormal
//! capped at 8K prefill tokens. Generation is a pure function of the spec,
//! seed included.

use crate::error::{Result, SimError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Standard normal quantile at 0.9, used to fit sigma from (P50, P90).
const Z90: f64 = 1.2815515655446004;

/// A token-count law given by its median and 90th percentile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    pub p50: f64,
    pub p90: f64,
}

impl QuantilePair {
    fn lognormal(&self) -> Result<LogNormal<f64>> {
        if self.p50 <= 0.0 || self.p90 < self.p50 {
            return Err(SimError::InvalidConfig(format!(
                "need 0 < p50 <= p90, got p50={} p90={}",
                self.p50, self.p90
            )));
        }
        let mu = self.p50.ln();
        let sigma = (self.p90.ln() - mu) / Z90;
        LogNormal::new(mu, sigma)
            .map_err(|e| SimError::InvalidConfig(format!("lognormal fit: {e}")))
    }
}

/// Trace generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSpec {
    /// Mean arrival rate, requests/s (Poisson process).
    pub qps: f64,
    pub duration_s: f64,
    /// Probability that a request is long-context.
    pub long_fraction: f64,
    pub seed: u64,
    pub short_prefill: QuantilePair,
    pub short_decode: QuantilePair,
    /// Short prefills are capped here (conversational data cap).
    pub short_prefill_cap: u64,
    pub long_prefill: QuantilePair,
    pub long_decode: QuantilePair,
    /// Long prefills are clamped into this range.
    pub long_prefill_range: (u64, u64),
}

impl TraceSpec {
    fn default_short_prefill() -> QuantilePair {
        QuantilePair { p50: 1_000.0, p90: 6_000.0 }
    }
    fn default_short_decode() -> QuantilePair {
        QuantilePair { p50: 256.0, p90: 512.0 }
    }
    fn default_short_prefill_cap() -> u64 {
        8_192
    }
    fn default_long_prefill() -> QuantilePair {
        QuantilePair { p50: 393_000.0, p90: 839_000.0 }
    }
    fn default_long_decode() -> QuantilePair {
        QuantilePair { p50: 518.0, p90: 808.0 }
    }
    fn default_long_prefill_range() -> (u64, u64) {
        (128_000, 1_000_000)
    }

    pub fn validate(&self) -> Result<()> {
        if self.qps <= 0.0 {
            return Err(SimError::InvalidConfig("qps must be > 0".into()));
        }
        if self.duration_s <= 0.0 {
            return Err(SimError::InvalidConfig("duration_s must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.long_fraction) {
            return Err(SimError::InvalidConfig("long_fraction must be in [0,1]".into()));
        }
        if self.long_prefill_range.0 > self.long_prefill_range.1 {
            return Err(SimError::InvalidConfig("long_prefill_range must be lo <= hi".into()));
        }
        for pair in [
            self.short_prefill,
            self.short_decode,
            self.long_prefill,
            self.long_decode,
        ] {
            pair.lognormal()?;
        }
        Ok(())
    }
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            qps: 1.0,
            duration_s: 60.0,
            long_fraction: 0.05,
            seed: 0,
            short_prefill: Self::default_short_prefill(),
            short_decode: Self::default_short_decode(),
            short_prefill_cap: Self::default_short_prefill_cap(),
            long_prefill: Self::default_long_prefill(),
            long_decode: Self::default_long_decode(),
            long_prefill_range: Self::default_long_prefill_range(),
        }
    }
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub arrival_s: f64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

/// Poisson arrivals at `qps` over the duration; each request is long with
/// probability `long_fraction`, sized from the fitted laws. Deterministic
/// per seed.
pub fn generate_trace(spec: &TraceSpec) -> Result<Vec<TraceEntry>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inter = Exp::new(spec.qps)
        .map_err(|e| SimError::InvalidConfig(format!("arrival process: {e}")))?;
    let short_prefill = spec.short_prefill.lognormal()?;
    let short_decode = spec.short_decode.lognormal()?;
    let long_prefill = spec.long_prefill.lognormal()?;
    let long_decode = spec.long_decode.lognormal()?;

    let mut entries = Vec::new();
    let mut t = inter.sample(&mut rng);
    while t < spec.duration_s {
        let is_long = rng.random_range(0.0..1.0) < spec.long_fraction;
        let (prefill, decode) = if is_long {
            let p = long_prefill.sample(&mut rng).round() as u64;
            let d = long_decode.sample(&mut rng).round().max(1.0) as u64;
            (p.clamp(spec.long_prefill_range.0, spec.long_prefill_range.1), d)
        } else {
            let p = short_prefill.sample(&mut rng).round().max(1.0) as u64;
            let d = short_decode.sample(&mut rng).round().max(1.0) as u64;
            (p.min(spec.short_prefill_cap), d)
        };
        entries.push(TraceEntry {
            arrival_s: t,
            prefill_tokens: prefill.max(1),
            decode_tokens: decode,
            id: None,
        });
        t += inter.sample(&mut rng);
    }
    Ok(entries)
}

/// A trace read from disk, with a counter for arrival-order fixups.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub entries: Vec<TraceEntry>,
    /// Number of lines that were out of arrival order and had to be sorted.
    pub sort_warnings: u64,
}

/// Reads a JSONL trace (one object per line: `arrival_s`, `prefill_tokens`,
/// `decode_tokens`, optional `id`). Malformed lines error with their line
/// number; unsorted arrivals are sorted with a warning counter.
pub fn load_trace(path: &Path) -> Result<LoadedTrace> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut entries: Vec<TraceEntry> = Vec::new();
    let mut sort_warnings = 0u64;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: TraceEntry = serde_json::from_str(&line).map_err(|e| {
            SimError::TraceParse { line: idx + 1, reason: e.to_string() }
        })?;
        if !entry.arrival_s.is_finite() || entry.arrival_s < 0.0 {
            return Err(SimError::TraceParse {
                line: idx + 1,
                reason: format!("arrival_s must be finite and >= 0, got {}", entry.arrival_s),
            });
        }
        if entry.prefill_tokens == 0 {
            return Err(SimError::TraceParse {
                line: idx + 1,
                reason: "prefill_tokens must be >= 1".into(),
            });
        }
        if let Some(prev) = entries.last() {
            if entry.arrival_s < prev.arrival_s {
                sort_warnings += 1;
            }
        }
        entries.push(entry);
    }
    if sort_warnings > 0 {
        log::warn!("trace {}: {sort_warnings} lines out of arrival order; sorting", path.display());
        entries.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s));
    }
    Ok(LoadedTrace { entries, sort_warnings })
}

/// Writes entries as JSONL.
pub fn write_trace<W: Write>(mut out: W, entries: &[TraceEntry]) -> Result<()> {
    for entry in entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| SimError::InvalidArgument(format!("serialize trace entry: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quantile(sorted: &[u64], q: f64) -> u64 {
        let rank = (q * sorted.len() as f64).ceil() as usize;
        sorted[rank.saturating_sub(1).min(sorted.len() - 1)]
    }

    #[test]
    fn zero_long_fraction_respects_short_cap() {
        let spec = TraceSpec {
            qps: 50.0,
            duration_s: 20.0,
            long_fraction: 0.0,
            seed: 3,
            ..TraceSpec::default()
        };
        let trace = generate_trace(&spec).unwrap();
        assert!(!trace.is_empty());
        assert!(trace.iter().all(|e| e.prefill_tokens <= 8_192));
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let spec = TraceSpec { qps: 10.0, duration_s: 30.0, ..TraceSpec::default() };
        let a = generate_trace(&spec).unwrap();
        let b = generate_trace(&spec).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_trace(&mut buf_a, &a).unwrap();
        write_trace(&mut buf_b, &b).unwrap();
        assert_eq!(buf_a, buf_b);

        let other = generate_trace(&TraceSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    /// The lognormal fit is done analytically from (P50, P90); sampling must
    /// reproduce both quantiles within 10%.
    #[test]
    fn long_sizes_hit_published_quantiles() {
        let spec = TraceSpec {
            qps: 200.0,
            duration_s: 50.0, // ~10k samples
            long_fraction: 1.0,
            seed: 7,
            ..TraceSpec::default()
        };
        let trace = generate_trace(&spec).unwrap();
        assert!(trace.len() > 8_000);
        let mut sizes: Vec<u64> = trace.iter().map(|e| e.prefill_tokens).collect();
        sizes.sort_unstable();
        let p50 = quantile(&sizes, 0.5) as f64;
        let p90 = quantile(&sizes, 0.9) as f64;
        assert!((p50 - 393_000.0).abs() / 393_000.0 < 0.10, "p50 {p50}");
        assert!((p90 - 839_000.0).abs() / 839_000.0 < 0.10, "p90 {p90}");
        assert!(sizes.iter().all(|&s| (128_000..=1_000_000).contains(&s)));

        let mut decodes: Vec<u64> = trace.iter().map(|e| e.decode_tokens).collect();
        decodes.sort_unstable();
        let d50 = quantile(&decodes, 0.5) as f64;
        let d90 = quantile(&decodes, 0.9) as f64;
        assert!((d50 - 518.0).abs() / 518.0 < 0.10, "decode p50 {d50}");
        assert!((d90 - 808.0).abs() / 808.0 < 0.10, "decode p90 {d90}");
    }

    /// Law of large numbers on the arrival process: the mean inter-arrival
    /// time converges to 1/qps within 1% over 1e5 samples.
    #[test]
    fn mean_interarrival_converges() {
        let spec = TraceSpec {
            qps: 1_000.0,
            duration_s: 100.0, // ~1e5 arrivals
            long_fraction: 0.0,
            seed: 11,
            ..TraceSpec::default()
        };
        let trace = generate_trace(&spec).unwrap();
        assert!(trace.len() > 90_000);
        let mut gaps = Vec::with_capacity(trace.len() - 1);
        for pair in trace.windows(2) {
            gaps.push(pair[1].arrival_s - pair[0].arrival_s);
        }
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((mean - 1e-3).abs() / 1e-3 < 0.01, "mean inter-arrival {mean}");
    }

    #[test]
    fn round_trip_through_jsonl() {
        let spec = TraceSpec { qps: 5.0, duration_s: 10.0, seed: 2, ..TraceSpec::default() };
        let trace = generate_trace(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded.entries, trace);
        assert_eq!(loaded.sort_warnings, 0);
    }

    #[test]
    fn empty_file_is_an_empty_trace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let loaded = load_trace(&path).unwrap();
        assert!(loaded.entries.is_empty());
    }

    #[test]
    fn negative_tokens_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"arrival_s\":0.0,\"prefill_tokens\":10,\"decode_tokens\":1}\n\
             {\"arrival_s\":0.5,\"prefill_tokens\":-4,\"decode_tokens\":1}\n",
        )
        .unwrap();
        match load_trace(&path) {
            Err(SimError::TraceParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error at line 2, got {other:?}"),
        }
    }

    #[test]
    fn unsorted_arrivals_are_sorted_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unsorted.jsonl");
        std::fs::write(
            &path,
            "{\"arrival_s\":5.0,\"prefill_tokens\":10,\"decode_tokens\":1}\n\
             {\"arrival_s\":1.0,\"prefill_tokens\":20,\"decode_tokens\":2}\n",
        )
        .unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded.sort_warnings, 1);
        assert!(loaded.entries[0].arrival_s <= loaded.entries[1].arrival_s);
    }
}
