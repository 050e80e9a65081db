//! Command implementations behind the `obsmpc` binary.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::simulation::{self, Mode, RunSummary, SimError, SimTrace};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("seed {seed}, {mode}: {source}")]
    Run {
        seed: u64,
        mode: Mode,
        source: SimError,
    },
    #[error("bad seed range '{0}' (expected A..B with A <= B)")]
    SeedRange(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Parses an inclusive `A..B` seed range.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::SeedRange(s.to_owned());
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

/// Directory of one run: `<out>/<mode>_<seed>`.
pub fn run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(format!("{mode}_{seed}"))
}

/// Result of one simulated run, written or not.
pub struct RunOutcome {
    pub config: RunConfig,
    pub trace: SimTrace,
    pub summary: RunSummary,
}

/// Runs one configuration as-is (seed and mode taken from it).
pub fn simulate(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let scenario = &cfg.model;
    let lc = cfg.loop_config();
    let mode = cfg.simulation.mode;
    let wrap = |source| CliError::Run {
        seed: cfg.noise.seed,
        mode,
        source,
    };
    let mut trace =
        simulation::run(scenario, &lc, cfg.simulation.steps, mode, cfg.simulation.oracle).map_err(wrap)?;
    trace.meta.config_hash = cfg.hash();
    let summary = simulation::summarize(&trace, &scenario.model(), &lc, cfg.burn_in());
    Ok(RunOutcome {
        config: cfg.clone(),
        trace,
        summary,
    })
}

/// Writes `trace.csv`, `summary.json` and `config.echo.json` into `dir`.
pub fn write_outcome(dir: &Path, outcome: &RunOutcome) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let trace_path = dir.join("trace.csv");
    let file = fs::File::create(&trace_path).map_err(io_err(&trace_path))?;
    simulation::write_trace_csv(&outcome.trace, BufWriter::new(file)).map_err(|source| CliError::Run {
        seed: outcome.summary.seed,
        mode: outcome.summary.mode,
        source,
    })?;
    let summary_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    fs::write(&summary_path, text).map_err(io_err(&summary_path))?;
    let echo_path = dir.join("config.echo.json");
    fs::write(&echo_path, outcome.config.to_json()).map_err(io_err(&echo_path))?;
    Ok(())
}

/// Flags of the `run` subcommand after parsing.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub mode: Option<Mode>,
    pub seeds: Option<Vec<u64>>,
    pub steps: Option<usize>,
    pub oracle: bool,
    pub out: Option<PathBuf>,
    /// Extra `path=value` overrides applied before the flags above.
    pub set: Vec<String>,
}

fn apply_common(base: &RunConfig, set: &[String], out: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    let mut cfg = base.with_overrides(set)?;
    if let Some(out) = out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.noise.seed = seed;
    c
}

/// Runs every requested seed concurrently and writes one directory per run.
/// Returns the run directories in seed order.
pub fn run_command(config_path: &Path, args: &RunArgs) -> Result<Vec<PathBuf>, CliError> {
    let base = RunConfig::load(config_path)?;
    let mut cfg = apply_common(&base, &args.set, &args.out)?;
    if let Some(m) = args.mode {
        cfg.simulation.mode = m;
    }
    if let Some(s) = args.steps {
        cfg.simulation.steps = s;
    }
    cfg.simulation.oracle |= args.oracle;
    cfg.validate()?;
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![cfg.noise.seed]);
    let out = cfg.output.dir.clone();
    seeds
        .par_iter()
        .map(|&seed| {
            let c = with_seed(&cfg, seed);
            let dir = run_dir(&out, c.simulation.mode, seed);
            let outcome = simulate(&c)?;
            write_outcome(&dir, &outcome)?;
            log::info!("{}: final error {:.4}", dir.display(), outcome.summary.final_error);
            Ok(dir)
        })
        .collect()
}

/// Per-mode aggregate written to `compare.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub mode: Mode,
    pub final_errors: Vec<f64>,
    pub lammin_min: f64,
    pub lammin_max: f64,
    pub mean_feasibility_rate: f64,
    pub mean_low_observability_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub nominal: ModeStats,
    pub active: ModeStats,
    /// Seeds on which the observability-seeking run ends with the smaller error.
    pub active_better: usize,
}

fn mode_stats(mode: Mode, sums: &[RunSummary]) -> ModeStats {
    let n = sums.len().max(1) as f64;
    ModeStats {
        mode,
        final_errors: sums.iter().map(|s| s.final_error).collect(),
        lammin_min: sums.iter().map(|s| s.lammin_min).fold(f64::INFINITY, f64::min),
        lammin_max: sums.iter().map(|s| s.lammin_max).fold(f64::NEG_INFINITY, f64::max),
        mean_feasibility_rate: sums.iter().map(|s| s.feasibility_rate).sum::<f64>() / n,
        mean_low_observability_rate: sums.iter().map(|s| s.low_observability_rate).sum::<f64>() / n,
    }
}

/// Runs both modes on the same seeds, writes the paired runs and `compare.json`.
pub fn compare_command(
    config_path: &Path,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    set: &[String],
) -> Result<CompareSummary, CliError> {
    let base = RunConfig::load(config_path)?;
    let cfg = apply_common(&base, set, &out)?;
    let seeds = seeds.unwrap_or_else(|| vec![cfg.noise.seed]);
    let out = cfg.output.dir.clone();
    let jobs: Vec<(Mode, u64)> = [Mode::NominalOnly, Mode::ObservabilitySeeking]
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(mode, seed)| {
            let mut c = with_seed(&cfg, seed);
            c.simulation.mode = mode;
            let outcome = simulate(&c)?;
            write_outcome(&run_dir(&out, mode, seed), &outcome)?;
            Ok(outcome.summary)
        })
        .collect::<Result<_, CliError>>()?;
    let (nominal, active) = results.split_at(seeds.len());
    let summary = CompareSummary {
        config_hash: cfg.hash(),
        seeds: seeds.clone(),
        nominal: mode_stats(Mode::NominalOnly, nominal),
        active: mode_stats(Mode::ObservabilitySeeking, active),
        active_better: nominal
            .iter()
            .zip(active)
            .filter(|(n, a)| a.final_error < n.final_error)
            .count(),
    };
    let path = out.join("compare.json");
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io_err(&path))?;
    Ok(summary)
}
