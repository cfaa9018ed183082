use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rdmabox_sim::harness::{self, ConfigError, ScenarioConfig};
use rdmabox_sim::presets;
use rdmabox_sim::workload::{self, BurstSpec, MixSpec};

#[derive(Parser)]
#[command(
    name = "rdmabox-sim",
    about = "Discrete-event model of RDMA request merging, doorbell chaining, \
             admission control, and adaptive completion polling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and emit a report.
    Run {
        /// Scenario config file (TOML).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Bundled scenario: fig1, fig2, fig5, fig7, fig8, table1.
        #[arg(long)]
        preset: Option<String>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here (stdout summary always prints).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scenario per axis value and print a summary table.
    Sweep {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Config field to sweep (actors, peers, window_bytes, strategy, ...).
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for per-value JSON reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find the admission window: sweep actors unregulated, return mean
    /// in-flight bytes at the IOPS peak.
    CalibrateWindow {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a trace file.
    GenTrace {
        /// etc, sys, small, medium, or large.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        requests: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_config(
    config: &Option<PathBuf>,
    preset: &Option<String>,
    seed: Option<u64>,
) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = match (config, preset) {
        (Some(path), None) => ScenarioConfig::from_file(path)?,
        (None, Some(name)) => presets::preset(name).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "unknown preset {name:?}; available: {}",
                presets::PRESET_NAMES.join(", ")
            ))
        })?,
        _ => {
            return Err(ConfigError::Invalid(
                "exactly one of --config or --preset is required".into(),
            ))
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(cfg: ScenarioConfig, out: Option<PathBuf>) -> Result<(), ConfigError> {
    let report = harness::run(&cfg)?;
    println!("{}", report.summary_line());
    if !report.violations.is_empty() {
        for v in &report.violations {
            eprintln!("invariant violation: {v}");
        }
    }
    if let Some(path) = out {
        std::fs::write(&path, report.to_json())?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(
    cfg: ScenarioConfig,
    axis: String,
    values: String,
    out: Option<PathBuf>,
) -> Result<(), ConfigError> {
    let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
    let reports = harness::sweep(&cfg, &axis, &values)?;
    print!("{}", harness::sweep_table(&axis, &values, &reports));
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        for (v, r) in values.iter().zip(&reports) {
            let path = dir.join(format!("{axis}-{v}.json"));
            std::fs::write(path, r.to_json())?;
        }
        println!("reports written to {}", dir.display());
    }
    Ok(())
}

fn cmd_calibrate(cfg: ScenarioConfig) -> Result<(), ConfigError> {
    let cal = harness::calibrate_window(&cfg)?;
    if let Some(w) = &cal.warning {
        eprintln!("warning: {w}");
    }
    println!(
        "peak at {} actors; calibrated window_bytes = {}",
        cal.peak_actors, cal.window_bytes
    );
    Ok(())
}

fn cmd_gen_trace(
    preset: String,
    out: PathBuf,
    requests: Option<usize>,
    seed: u64,
) -> Result<(), ConfigError> {
    let base = ScenarioConfig::default();
    let trace = match preset.as_str() {
        "etc" | "sys" => {
            let mut mix = if preset == "etc" { MixSpec::etc() } else { MixSpec::sys() };
            if let Some(n) = requests {
                mix.total_requests = n;
            }
            workload::gen_kv(&mix, mix.total_requests, base.actors, base.peers, seed)
        }
        "small" | "medium" | "large" => {
            let mut spec = match preset.as_str() {
                "small" => presets::fig2_small(),
                _ => {
                    let (large, warning) = presets::calibrate_large_cluster(&presets::fig2());
                    if let Some(w) = warning {
                        eprintln!("warning: {w}");
                    }
                    let cluster = if preset == "large" {
                        large
                    } else {
                        // median of the small and large cluster sizes
                        (1 + large).div_ceil(2)
                    };
                    eprintln!("calibrated {preset} cluster size: {cluster}");
                    BurstSpec { cluster_size: cluster, ..presets::fig2_large(large) }
                }
            };
            if let Some(n) = requests {
                spec.total_requests = n;
            }
            workload::gen_burst(&spec, base.actors, base.peers)
        }
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown trace preset {other:?}; use etc, sys, small, medium, or large"
            )))
        }
    };
    workload::save_trace_file(&out, &trace)?;
    println!("{} records written to {}", trace.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, preset, seed, out } => {
            load_config(&config, &preset, seed).and_then(|cfg| cmd_run(cfg, out))
        }
        Command::Sweep { config, preset, axis, values, seed, out } => {
            load_config(&config, &preset, seed)
                .and_then(|cfg| cmd_sweep(cfg, axis, values, out))
        }
        Command::CalibrateWindow { config, preset, seed } => {
            load_config(&config, &preset, seed).and_then(cmd_calibrate)
        }
        Command::GenTrace { preset, out, requests, seed } => {
            cmd_gen_trace(preset, out, requests, seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
