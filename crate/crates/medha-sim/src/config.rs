//! Experiment configuration: one TOML file describes the model, hardware,
//! parallelism, SLOs, packer, trace source, and optional sweep axes or
//! static-pool baseline. Field names are documented in
//! `docs/config-schema.md` with a commented example.

use crate::costmodel::{
    HardwareProfile, LinkProfile, ModelConfig, ParallelismConfig, ProfileTable,
};
use crate::error::{Result, SimError};
use crate::scheduler::{PackerConfig, Policy, SloSpec};
use crate::workload::TraceSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Model shape: a preset name, individual overrides, or both.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `llama3-8b` or `llama3-70b`.
    pub preset: Option<String>,
    pub num_query_heads: Option<u64>,
    pub num_kv_heads: Option<u64>,
    pub head_dim: Option<u64>,
    pub num_layers: Option<u64>,
    pub bytes_per_element: Option<u64>,
    pub mlp_flops_per_token: Option<f64>,
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut base = match self.preset.as_deref() {
            Some("llama3-8b") => ModelConfig::llama3_8b(),
            Some("llama3-70b") => ModelConfig::llama3_70b(),
            Some(other) => {
                return Err(SimError::InvalidConfig(format!(
                    "unknown model preset '{other}' (expected llama3-8b|llama3-70b)"
                )))
            }
            None => {
                let all = self.num_query_heads.is_some()
                    && self.num_kv_heads.is_some()
                    && self.head_dim.is_some()
                    && self.num_layers.is_some()
                    && self.bytes_per_element.is_some()
                    && self.mlp_flops_per_token.is_some();
                if !all {
                    return Err(SimError::InvalidConfig(
                        "model needs a preset or every shape field".into(),
                    ));
                }
                ModelConfig {
                    num_query_heads: 0,
                    num_kv_heads: 0,
                    head_dim: 0,
                    num_layers: 0,
                    bytes_per_element: 0,
                    mlp_flops_per_token: 0.0,
                }
            }
        };
        if let Some(v) = self.num_query_heads {
            base.num_query_heads = v;
        }
        if let Some(v) = self.num_kv_heads {
            base.num_kv_heads = v;
        }
        if let Some(v) = self.head_dim {
            base.head_dim = v;
        }
        if let Some(v) = self.num_layers {
            base.num_layers = v;
        }
        if let Some(v) = self.bytes_per_element {
            base.bytes_per_element = v;
        }
        if let Some(v) = self.mlp_flops_per_token {
            base.mlp_flops_per_token = v;
        }
        base.validate()?;
        Ok(base)
    }
}

/// Hardware profile: a preset name plus optional overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    /// `h100` or `a100`.
    pub preset: Option<String>,
    pub peak_flops: Option<f64>,
    pub mem_bandwidth: Option<f64>,
    pub mem_capacity: Option<f64>,
    pub intra_server_link: Option<LinkProfile>,
    pub cross_server_link: Option<LinkProfile>,
    pub fixed_step_overhead: Option<f64>,
    pub devices_per_server: Option<u64>,
    pub compute_efficiency: Option<f64>,
    pub bandwidth_efficiency: Option<f64>,
    pub activation_reserve_bytes: Option<f64>,
}

impl HardwareSpec {
    pub fn resolve(&self) -> Result<HardwareProfile> {
        let mut base = match self.preset.as_deref() {
            Some("h100") | None => HardwareProfile::h100(),
            Some("a100") => HardwareProfile::a100(),
            Some(other) => {
                return Err(SimError::InvalidConfig(format!(
                    "unknown hardware preset '{other}' (expected h100|a100)"
                )))
            }
        };
        if let Some(v) = self.peak_flops {
            base.peak_flops = v;
        }
        if let Some(v) = self.mem_bandwidth {
            base.mem_bandwidth = v;
        }
        if let Some(v) = self.mem_capacity {
            base.mem_capacity = v;
        }
        if let Some(v) = self.intra_server_link {
            base.intra_server_link = v;
        }
        if let Some(v) = self.cross_server_link {
            base.cross_server_link = v;
        }
        if let Some(v) = self.fixed_step_overhead {
            base.fixed_step_overhead = v;
        }
        if let Some(v) = self.devices_per_server {
            base.devices_per_server = v;
        }
        if let Some(v) = self.compute_efficiency {
            base.compute_efficiency = v;
        }
        if let Some(v) = self.bandwidth_efficiency {
            base.bandwidth_efficiency = v;
        }
        if let Some(v) = self.activation_reserve_bytes {
            base.activation_reserve_bytes = v;
        }
        base.validate()?;
        Ok(base)
    }
}

/// Where the trace comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceSourceKind {
    Generate,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub source: TraceSourceKind,
    /// JSONL path when `source = "file"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(flatten)]
    pub spec: TraceSpec,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self { source: TraceSourceKind::Generate, path: None, spec: TraceSpec::default() }
    }
}

/// Static-pool fragmentation baseline: devices split into a short-request
/// pool and a long-request pool at a prefill-token threshold. A `None` pool
/// starves its share of the trace (degenerate split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSplit {
    pub token_threshold: u64,
    pub short: Option<ParallelismConfig>,
    pub long: Option<ParallelismConfig>,
}

/// Sweep axes; every present axis contributes to the Cartesian product.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub qps: Option<Vec<f64>>,
    pub policy: Option<Vec<String>>,
    /// Static chunk sizes.
    pub chunk: Option<Vec<u64>>,
    pub p_spp: Option<Vec<u64>>,
    pub p_kvp: Option<Vec<u64>>,
    /// Single-request context lengths (replaces the trace per cell).
    pub context: Option<Vec<u64>>,
}

impl SweepSpec {
    pub fn is_empty(&self) -> bool {
        self.qps.is_none()
            && self.policy.is_none()
            && self.chunk.is_none()
            && self.p_spp.is_none()
            && self.p_kvp.is_none()
            && self.context.is_none()
    }
}

fn default_true() -> bool {
    true
}

fn default_one() -> u64 {
    1
}

/// The experiment file as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ExperimentConfig::default_policy")]
    pub policy: Policy,
    /// Wall-clock horizon; unfinished requests are reported as censored.
    #[serde(default)]
    pub horizon_s: Option<f64>,
    #[serde(default = "default_true")]
    pub log_steps: bool,
    #[serde(default)]
    pub exact_pipeline: bool,
    /// Weight footprint override; defaults to the model's linear-work bytes.
    #[serde(default)]
    pub weight_bytes: Option<f64>,
    #[serde(default = "default_one")]
    pub max_concurrent_long_per_rank: u64,
    #[serde(default)]
    pub rank_token_limit: Option<u64>,
    /// Optional measured profile table (CSV) overriding the analytic model.
    #[serde(default)]
    pub profile_table: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub hardware: HardwareSpec,
    pub parallelism: ParallelismConfig,
    #[serde(default)]
    pub slo: SloSpec,
    #[serde(default)]
    pub packer: PackerConfig,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub pools: Option<PoolSplit>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    fn default_policy() -> Policy {
        Policy::Ilrs
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::InvalidConfig(format!("config parse: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Resolves presets and validates every invariant, including the memory
    /// feasibility gate.
    pub fn resolve(&self) -> Result<Experiment> {
        let model = self.model.resolve()?;
        let hardware = self.hardware.resolve()?;
        self.parallelism.validate(&model)?;
        self.slo.validate()?;
        if self.packer.token_budget == 0 || self.packer.max_chunk == 0 {
            return Err(SimError::InvalidConfig(
                "packer token_budget and max_chunk must be >= 1".into(),
            ));
        }
        if let TraceSourceKind::File = self.trace.source {
            if self.trace.path.is_none() {
                return Err(SimError::InvalidConfig(
                    "trace.source = \"file\" requires trace.path".into(),
                ));
            }
        }
        let weight_bytes = self.weight_bytes.unwrap_or_else(|| model.approx_weight_bytes());
        let profile_table = match &self.profile_table {
            Some(path) => Some(ProfileTable::from_csv_path(path)?),
            None => None,
        };
        Ok(Experiment {
            seed: self.seed,
            policy: self.policy,
            horizon_s: self.horizon_s,
            log_steps: self.log_steps,
            exact_pipeline: self.exact_pipeline,
            weight_bytes,
            max_concurrent_long_per_rank: self.max_concurrent_long_per_rank.max(1),
            rank_token_limit: self.rank_token_limit,
            profile_table,
            model,
            hardware,
            parallelism: self.parallelism,
            slo: self.slo.clone(),
            packer: self.packer,
        })
    }
}

/// A fully resolved experiment, ready to simulate.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub policy: Policy,
    pub horizon_s: Option<f64>,
    pub log_steps: bool,
    pub exact_pipeline: bool,
    pub weight_bytes: f64,
    pub max_concurrent_long_per_rank: u64,
    pub rank_token_limit: Option<u64>,
    pub profile_table: Option<ProfileTable>,
    pub model: ModelConfig,
    pub hardware: HardwareProfile,
    pub parallelism: ParallelismConfig,
    pub slo: SloSpec,
    pub packer: PackerConfig,
}

impl Experiment {
    /// A plain experiment around explicit components (tests, sweeps).
    pub fn new(
        model: ModelConfig,
        hardware: HardwareProfile,
        parallelism: ParallelismConfig,
    ) -> Self {
        let weight_bytes = model.approx_weight_bytes();
        Self {
            seed: 0,
            policy: Policy::Ilrs,
            horizon_s: None,
            log_steps: true,
            exact_pipeline: false,
            weight_bytes,
            max_concurrent_long_per_rank: 1,
            rank_token_limit: None,
            profile_table: None,
            model,
            hardware,
            parallelism,
            slo: SloSpec::default(),
            packer: PackerConfig::default(),
        }
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_static_chunk(mut self, chunk: u64) -> Self {
        self.packer.static_chunk = Some(chunk);
        self
    }
}
