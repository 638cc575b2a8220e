//! medha-sim — deterministic discrete-event simulator and scheduling library
//! for long-context LLM inference serving.
//!
//! The crate models a single serving replica built from three composable
//! parallelism axes (tensor, sequence-pipeline, and KV-cache parallelism),
//! an analytical roofline runtime predictor, and a slack-aware batch
//! scheduler with adaptive prefill chunking and prefill-prefill batching.
//! Simulations advance one batch step at a time and are bit-reproducible
//! for a given (trace, config, seed).
//!
//! Module map:
//! - [`costmodel`]: model/hardware/parallelism configs, FLOP and byte
//!   formulas, and the roofline step-time predictor.
//! - [`attention`]: exact small-scale attention arithmetic used as the
//!   correctness oracle for online-softmax merging of partial outputs.
//! - [`parallel`]: pipeline schedules, SPP/KVP closed-form timing, and
//!   memory feasibility checks.
//! - [`scheduler`]: request lifecycle, slack computation, scheduling
//!   policies, adaptive chunk sizing, and deadline-driven batch packing.
//! - [`balancer`]: KVP rank placement and dynamic worker growth.
//! - [`simulator`]: the step-driven replica controller and metrics.
//! - [`workload`]: trace generation and JSONL ingestion.
//! - [`config`]: experiment configuration (TOML) and presets.
//! - [`report`]: percentile summaries, CSV/JSON reports, sweeps.

pub mod attention;
pub mod balancer;
pub mod config;
pub mod costmodel;
pub mod error;
pub mod parallel;
pub mod report;
pub mod scheduler;
pub mod simulator;
pub mod workload;

pub use config::ExperimentConfig;
pub use costmodel::{HardwareProfile, ModelConfig, ParallelismConfig, RuntimePredictor};
pub use error::SimError;
pub use scheduler::{Policy, Request, SloSpec};
pub use simulator::{run, run_baseline_pools, SimMetrics};
pub use workload::{generate_trace, load_trace, TraceEntry, TraceSpec};
