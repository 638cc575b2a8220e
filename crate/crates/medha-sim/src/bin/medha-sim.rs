//! Command-line front end: run single experiments, sweeps, trace
//! generation, and config validation. Log verbosity comes from the
//! `MEDHA_SIM_LOG` environment variable (error|warn|info|debug|trace).

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use medha_sim::config::ExperimentConfig;
use medha_sim::report::{
    materialize_trace, render_cdf_svg, render_summary, run_one, run_sweep, summarize,
    write_cdf_csv, write_metrics_json, write_requests_csv, write_sweep_csv,
};
use medha_sim::workload::{generate_trace, write_trace};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "medha-sim", version, about = "Long-context LLM serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replay finished prefills through the exact pipeline schedule.
    #[arg(long)]
    exact_pipeline: bool,
    /// Emit CDF data files and simple SVG charts.
    #[arg(long)]
    plot: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics, per-request CSV, and a summary.
    Run(CommonArgs),
    /// Run the config's sweep axes as a Cartesian product of cells.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Max concurrent simulations.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Generate a trace JSONL from the config's [trace] section.
    GenTrace {
        /// Experiment config file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output trace path.
        #[arg(long, default_value = "trace.jsonl")]
        out: PathBuf,
        /// Override the trace seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and validate a config, including memory feasibility.
    ValidateConfig {
        /// Experiment config file (TOML).
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    exact_pipeline: bool,
) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.trace.spec.seed = seed;
    }
    if exact_pipeline {
        cfg.exact_pipeline = true;
    }
    Ok(cfg)
}

fn cmd_run(args: &CommonArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, args.seed, args.exact_pipeline)?;
    let exp = cfg.resolve()?;
    let trace = materialize_trace(&cfg, None)?;
    log::info!("running {} requests under policy {}", trace.len(), exp.policy);
    let metrics = run_one(&trace, &exp, cfg.pools.as_ref())?;

    std::fs::create_dir_all(&args.out)?;
    write_metrics_json(&args.out.join("metrics.json"), &metrics)?;
    let csv = File::create(args.out.join("requests.csv"))?;
    write_requests_csv(BufWriter::new(csv), &metrics)?;

    let summary = summarize(&metrics);
    let rendered = render_summary(&summary);
    std::fs::write(args.out.join("summary.txt"), &rendered)?;
    print!("{rendered}");

    if args.plot {
        emit_plots(&args.out, &metrics)?;
    }
    Ok(())
}

fn emit_plots(out: &Path, metrics: &medha_sim::SimMetrics) -> anyhow::Result<()> {
    for (name, values) in [("ttft_s", metrics.ttft_values()), ("tpot_s", metrics.tpot_values())] {
        let file = File::create(out.join(format!("cdf_{name}.csv")))?;
        write_cdf_csv(BufWriter::new(file), name, &values)?;
        std::fs::write(
            out.join(format!("cdf_{name}.svg")),
            render_cdf_svg(&format!("{name} CDF"), &values),
        )?;
    }
    Ok(())
}

fn cmd_sweep(common: &CommonArgs, jobs: usize) -> anyhow::Result<()> {
    let cfg = load_config(&common.config, common.seed, common.exact_pipeline)?;
    let Some(spec) = cfg.sweep.clone() else {
        bail!("config has no [sweep] section");
    };
    if spec.is_empty() {
        bail!("[sweep] section lists no axes");
    }
    let rows = run_sweep(&cfg, &spec, jobs)?;
    std::fs::create_dir_all(&common.out)?;
    let file = File::create(common.out.join("sweep.csv"))?;
    write_sweep_csv(BufWriter::new(file), &rows)?;
    let json = serde_json::to_string_pretty(&rows)?;
    std::fs::write(common.out.join("sweep.json"), json)?;
    let infeasible = rows.iter().filter(|r| r.infeasible).count();
    println!(
        "sweep complete: {} cells, {} infeasible -> {}",
        rows.len(),
        infeasible,
        common.out.join("sweep.csv").display()
    );
    Ok(())
}

fn cmd_gen_trace(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(config, seed, false)?;
    let trace = generate_trace(&cfg.trace.spec)?;
    let file = File::create(out)?;
    write_trace(BufWriter::new(file), &trace)?;
    println!("wrote {} requests to {}", trace.len(), out.display());
    Ok(())
}

fn cmd_validate(config: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config, None, false)?;
    let exp = cfg.resolve()?;
    // Surface the memory gate with the trace the config would run.
    let trace = materialize_trace(&cfg, None)?;
    let max_context =
        trace.iter().map(|e| e.prefill_tokens + e.decode_tokens).max().unwrap_or(0);
    let check = medha_sim::parallel::memory_feasible(
        max_context,
        &exp.model,
        &exp.hardware,
        &exp.parallelism,
        exp.weight_bytes,
    );
    println!(
        "config ok: {} requests, {} devices, max context {}, headroom {:.2} GB/device{}",
        trace.len(),
        exp.parallelism.devices(),
        max_context,
        check.headroom_bytes / 1e9,
        if check.feasible { "" } else { " (INFEASIBLE)" }
    );
    if !check.feasible {
        bail!("memory-infeasible configuration");
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MEDHA_SIM_LOG")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(common) => cmd_run(common),
        Command::Sweep { common, jobs } => cmd_sweep(common, *jobs),
        Command::GenTrace { config, out, seed } => cmd_gen_trace(config, out, *seed),
        Command::ValidateConfig { config } => cmd_validate(config),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
