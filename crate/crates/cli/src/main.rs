//! `persmon`: run persistent-monitoring experiments, evaluate them, and run
//! the analytic self-test suite.

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use persmon::eval::{dataset_kl_table, evaluate_cycles, EvalConfig, MetricRow};
use persmon::selftest::{self, Tolerances};
use persmon::sim::{self, ExperimentConfig};
use persmon::world::World;

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "PERSMON_OUT";
const MANIFEST_VERSION: u32 = 1;

const CONFIG_JSON: &str = "config.json";
const MANIFEST_JSON: &str = "manifest.json";
const METRICS_CSV: &str = "metrics.csv";
const SUMMARY_JSON: &str = "summary.json";
const DATASET_KL_CSV: &str = "dataset_kl.csv";
const EVAL_CONFIG_JSON: &str = "eval_config.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("self-test failed: {0} check(s)")]
    Selftest(usize),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Selftest(_) => 1,
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

/// Bad inputs and missing artifacts are configuration errors; everything
/// else surfaced by the library is a runtime failure.
impl From<persmon::Error> for CliError {
    fn from(e: persmon::Error) -> Self {
        use persmon::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) | E::InsufficientData { .. } => {
                Self::Config(e.to_string())
            }
            _ => Self::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "persmon", version, about = "Persistent-monitoring simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        /// JSON experiment config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory. Defaults to a hash-named directory under
        /// $PERSMON_OUT (or `runs/`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config field, e.g. `--set sensing.n_r=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compute per-cycle metrics and dataset KL-D for a finished run.
    Eval {
        run_dir: PathBuf,
        out_dir: PathBuf,
        /// Also render SVG plots from the metrics CSV.
        #[arg(long)]
        plots: bool,
        /// Override an evaluation field, e.g. `--set n_kl=2000`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the analytic-oracle checks.
    Selftest {
        /// Multiply every tolerance by this factor.
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    manifest_version: u32,
    config_sha256: String,
    master_seed: u64,
    start_time: f64,
    end_time: f64,
    outputs: Vec<String>,
    run_format_version: u32,
    created_unix_secs: u64,
    config: ExperimentConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn cmd_run(
    config: Option<&Path>,
    out: Option<PathBuf>,
    overrides: &[String],
) -> Result<PathBuf, CliError> {
    let doc = config.map(config::read_document).transpose()?;
    let cfg: ExperimentConfig = config::layered(&ExperimentConfig::default(), doc, overrides)?;
    cfg.validate()?;
    let cfg_text =
        serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    let hash = sha256_hex(cfg_text.as_bytes());
    let out = out.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("run-{}", &hash[..12]))
    });
    let world = World::build(&cfg.world, &cfg.region)?;

    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let config_path = out.join(CONFIG_JSON);
    fs::write(&config_path, &cfg_text).map_err(io_err(&config_path))?;
    let outputs = [
        CONFIG_JSON,
        sim::CYCLES_CSV,
        sim::DETAILS_CSV,
        sim::OBSERVATIONS_CSV,
        sim::SERVER_VERSIONS_JSON,
        sim::BELIEF_DIR,
        sim::REGION_DIR,
    ];
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        config_sha256: hash,
        master_seed: cfg.seed,
        start_time: 0.0,
        end_time: cfg.horizon,
        outputs: outputs.iter().map(|s| (*s).to_owned()).collect(),
        run_format_version: sim::FORMAT_VERSION,
        created_unix_secs: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        config: cfg.clone(),
    };
    write_json(&out.join(MANIFEST_JSON), &manifest)?;

    let run = sim::run_experiment_in(&cfg, &world).map_err(|e| CliError::Runtime(e.to_string()))?;
    sim::write_run(&out, &run).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "{} cycles, {} server versions, virtual end {:.1} s -> {}",
        run.records.len(),
        run.server_versions.len(),
        run.end_time,
        out.display()
    );
    Ok(out)
}

fn cmd_eval(
    run_dir: &Path,
    out_dir: &Path,
    plots: bool,
    overrides: &[String],
) -> Result<(), CliError> {
    let config_path = run_dir.join(CONFIG_JSON);
    if !config_path.exists() {
        return Err(CliError::Config(format!(
            "missing artifact {}",
            config_path.display()
        )));
    }
    let cfg: ExperimentConfig = config::layered(
        &ExperimentConfig::default(),
        Some(config::read_document(&config_path)?),
        &[],
    )?;
    let base = EvalConfig {
        seed: cfg.seed,
        ..EvalConfig::default()
    };
    let ecfg: EvalConfig = config::layered(&base, None, overrides)?;
    let run = sim::load_run(run_dir)?;
    if run.cycles.is_empty() {
        return Err(CliError::Config(format!(
            "{} holds no completed cycles; nothing to evaluate",
            run_dir.display()
        )));
    }
    let world = World::build(&cfg.world, &cfg.region)?;

    let series = evaluate_cycles(&cfg, &world, &run, &ecfg)?;
    let table = dataset_kl_table(
        &cfg,
        &world,
        &run.batches,
        &ecfg.dynamics,
        persmon::seed::child(ecfg.seed, "dataset-kl"),
    )?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_json(&out_dir.join(EVAL_CONFIG_JSON), &ecfg)?;
    series
        .write_csv(&out_dir.join(METRICS_CSV))
        .map_err(CliError::from)?;
    write_json(&out_dir.join(SUMMARY_JSON), &series.summary())?;
    let kl_path = out_dir.join(DATASET_KL_CSV);
    let mut w = csv::Writer::from_path(&kl_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in &table {
        w.serialize(row)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(io_err(&kl_path))?;
    if plots {
        write_plots(out_dir)?;
    }
    let s = series.summary();
    println!(
        "{} cycles: %EP {:.2} (initial {:.2}), KL-D improved in {:.0}% -> {}",
        s.cycles,
        s.mean_pct_ep_adapted,
        s.mean_pct_ep_initial,
        100.0 * s.frac_kld_adapted_below_initial,
        out_dir.display()
    );
    Ok(())
}

/// Renders plots from `metrics.csv` alone.
fn write_plots(out_dir: &Path) -> Result<(), CliError> {
    let path = out_dir.join(METRICS_CSV);
    let mut r = csv::Reader::from_path(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let rows: Vec<MetricRow> = r
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let col = |f: fn(&MetricRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let charts = [
        (
            "entropy.svg",
            plot::line_chart(
                "Entropy of sensed sites",
                "nats",
                &[
                    plot::Series {
                        label: "selected",
                        color: "#1f77b4",
                        values: col(|r| r.entropy_selected),
                    },
                    plot::Series {
                        label: "random",
                        color: "#d62728",
                        values: col(|r| r.entropy_random),
                    },
                ],
            ),
        ),
        (
            "kld.svg",
            plot::line_chart(
                "KL-D to oracle posterior",
                "nats",
                &[
                    plot::Series {
                        label: "adapted",
                        color: "#1f77b4",
                        values: col(|r| r.kld_adapted),
                    },
                    plot::Series {
                        label: "initial",
                        color: "#7f7f7f",
                        values: col(|r| r.kld_initial),
                    },
                ],
            ),
        ),
        (
            "pct_ep.svg",
            plot::line_chart(
                "Effective particles",
                "%",
                &[
                    plot::Series {
                        label: "adapted",
                        color: "#1f77b4",
                        values: col(|r| r.pct_ep_adapted),
                    },
                    plot::Series {
                        label: "initial",
                        color: "#7f7f7f",
                        values: col(|r| r.pct_ep_initial),
                    },
                ],
            ),
        ),
        (
            "loglik_ratio.svg",
            plot::line_chart(
                "Log-likelihood ratio, selected / random",
                "ratio",
                &[plot::Series {
                    label: "ratio",
                    color: "#2ca02c",
                    values: col(|r| r.loglik_ratio),
                }],
            ),
        ),
    ];
    for (name, svg) in charts {
        let p = out_dir.join(name);
        fs::write(&p, svg).map_err(io_err(&p))?;
    }
    Ok(())
}

fn cmd_selftest(scale: f64) -> Result<(), CliError> {
    if !(scale >= 0.0) {
        return Err(CliError::Config(format!(
            "tolerance scale must be non-negative, got {scale}"
        )));
    }
    let results = selftest::run(&Tolerances::default().scaled(scale))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &results {
        println!(
            "{} {}: error {:.3e} (tolerance {:.3e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.error,
            r.tolerance
        );
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::Selftest(n)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            overrides,
        } => cmd_run(config.as_deref(), out, &overrides).map(|_| ()),
        Command::Eval {
            run_dir,
            out_dir,
            plots,
            overrides,
        } => cmd_eval(&run_dir, &out_dir, plots, &overrides),
        Command::Selftest { tolerance_scale } => cmd_selftest(tolerance_scale),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("persmon: {e}");
            ExitCode::from(e.code())
        }
    }
}
