//! Command-line driver for the random loop model simulator.
//!
//! Modes: `scan` (β sweep of the second moment and mass), `moments`
//! (single and pair mass tables), `betac` (critical-point bisection),
//! `partition-dump` (per-sample sorted fractions as JSON lines), and
//! `pd-check` (simulated moments against exact Poisson-Dirichlet values).
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 on runtime
//! failures (including bracketing failures in betac mode).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde::Deserialize;

use loopsim::experiment::{
    dump_partitions, estimate_beta_c, run_moments, run_pd_check, run_scan, BetaSpec,
    ExperimentConfig, ExperimentError, Mode, ThetaChoice,
};
use loopsim::lattice::BoundaryCondition;

#[derive(Debug, Parser)]
#[command(name = "loopsim", version, about = "Random interchange and random loop model simulator")]
struct Cli {
    /// Simulation mode: scan|moments|betac|partition-dump|pd-check.
    #[arg(long)]
    mode: Option<Mode>,
    /// Lattice side length L (betac compares L against 2L).
    #[arg(long)]
    size: Option<usize>,
    /// Spatial boundary condition: periodic|free.
    #[arg(long)]
    bc: Option<BoundaryCondition>,
    /// Cross intensity u in [0, 1]; bars have intensity 1-u.
    #[arg(long)]
    u: Option<f64>,
    /// Single inverse temperature (moments, pd-check, partition-dump).
    #[arg(long)]
    beta: Option<f64>,
    /// Grid start (scan, betac).
    #[arg(long)]
    beta_min: Option<f64>,
    /// Grid end (scan, betac).
    #[arg(long)]
    beta_max: Option<f64>,
    /// Number of grid points (scan).
    #[arg(long)]
    beta_steps: Option<usize>,
    /// Mass estimator hypothesis: auto|both|a positive number.
    #[arg(long)]
    theta: Option<ThetaChoice>,
    /// Sample-count cap per job.
    #[arg(long)]
    samples: Option<usize>,
    /// Adaptive floor; set equal to --samples for a fixed count.
    #[arg(long)]
    min_samples: Option<usize>,
    /// Master seed; every output is a pure function of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: csv|json.
    #[arg(long)]
    format: Option<Format>,
    /// Exponent x of the L^x factor in the betac crossing statistic.
    #[arg(long)]
    crossing_exponent: Option<f64>,
    /// Bracket width at which the betac bisection stops.
    #[arg(long)]
    betac_tol: Option<f64>,
    /// N of the Kingman construction (pd-check provenance).
    #[arg(long)]
    kingman_n: Option<usize>,
    /// Include length fractions L_j/(beta*|V|) in partition dumps.
    #[arg(long)]
    dump_lengths: bool,
    /// Keep per-sample scatter values in scan output.
    #[arg(long)]
    scatter: bool,
    /// TOML file whose keys mirror the flags one-to-one; explicit flags
    /// take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// File-based configuration; keys mirror the CLI flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    mode: Option<String>,
    size: Option<usize>,
    bc: Option<String>,
    u: Option<f64>,
    beta: Option<f64>,
    beta_min: Option<f64>,
    beta_max: Option<f64>,
    beta_steps: Option<usize>,
    theta: Option<String>,
    samples: Option<usize>,
    min_samples: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
    format: Option<String>,
    crossing_exponent: Option<f64>,
    betac_tol: Option<f64>,
    kingman_n: Option<usize>,
    dump_lengths: Option<bool>,
    scatter: Option<bool>,
}

struct Settings {
    cfg: ExperimentConfig,
    out: Option<PathBuf>,
    format: Format,
}

fn merge(cli: Cli) -> Result<Settings, String> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| format!("cannot parse config {}: {e}", path.display()))?
        }
        None => FileConfig::default(),
    };

    fn parse_opt<T: std::str::FromStr>(s: Option<String>, what: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        s.map(|v| v.parse::<T>().map_err(|e| format!("config {what}: {e}"))).transpose()
    }

    let mode = match cli.mode {
        Some(m) => m,
        None => parse_opt(file.mode, "mode")?.ok_or("missing --mode")?,
    };
    let size = cli.size.or(file.size).ok_or("missing --size")?;
    let u = cli.u.or(file.u).ok_or("missing --u")?;

    let beta_single = cli.beta.or(file.beta);
    let beta_min = cli.beta_min.or(file.beta_min);
    let beta_max = cli.beta_max.or(file.beta_max);
    let beta_steps = cli.beta_steps.or(file.beta_steps);
    let beta = match (beta_single, beta_min, beta_max) {
        (Some(b), None, None) => BetaSpec::Single(b),
        (None, Some(min), Some(max)) => {
            let steps = beta_steps.unwrap_or(2);
            BetaSpec::Grid { min, max, steps }
        }
        (None, None, None) => return Err("missing --beta (or --beta-min/--beta-max)".into()),
        _ => return Err("use either --beta or --beta-min/--beta-max, not both".into()),
    };

    let mut cfg = ExperimentConfig::new(mode, size, u, beta);
    if let Some(bc) = cli.bc {
        cfg.bc = bc;
    } else if let Some(bc) = parse_opt(file.bc, "bc")? {
        cfg.bc = bc;
    }
    if let Some(t) = cli.theta {
        cfg.theta = t;
    } else if let Some(t) = parse_opt(file.theta, "theta")? {
        cfg.theta = t;
    }
    if let Some(v) = cli.samples.or(file.samples) {
        cfg.samples = v;
        cfg.min_samples = cfg.min_samples.min(v);
    }
    if let Some(v) = cli.min_samples.or(file.min_samples) {
        cfg.min_samples = v;
    }
    if let Some(v) = cli.seed.or(file.seed) {
        cfg.seed = v;
    }
    if let Some(v) = cli.workers.or(file.workers) {
        cfg.workers = v;
    }
    if let Some(v) = cli.crossing_exponent.or(file.crossing_exponent) {
        cfg.crossing_exponent = v;
    }
    if let Some(v) = cli.betac_tol.or(file.betac_tol) {
        cfg.betac_tol = v;
    }
    if let Some(v) = cli.kingman_n.or(file.kingman_n) {
        cfg.kingman_n = v;
    }
    cfg.dump_lengths = cli.dump_lengths || file.dump_lengths.unwrap_or(false);
    cfg.scatter = cli.scatter || file.scatter.unwrap_or(false);

    let format = match cli.format {
        Some(f) => f,
        None => match file.format.as_deref() {
            Some("csv") | None => Format::Csv,
            Some("json") => Format::Json,
            Some(other) => return Err(format!("unknown format `{other}`")),
        },
    };

    Ok(Settings { cfg, out: cli.out.or(file.out), format })
}

fn open_sink(out: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn run(settings: &Settings) -> Result<(), ExperimentError> {
    let cfg = &settings.cfg;
    let mut sink = open_sink(&settings.out)?;
    match cfg.mode {
        Mode::Scan => {
            let report = run_scan(cfg)?;
            match settings.format {
                Format::Csv => report.write_csv(&mut sink)?,
                Format::Json => write_json(&mut sink, &report)?,
            }
        }
        Mode::Moments => {
            let report = run_moments(cfg)?;
            match settings.format {
                Format::Csv => report.write_csv(&mut sink)?,
                Format::Json => write_json(&mut sink, &report)?,
            }
        }
        Mode::Betac => {
            let estimate = estimate_beta_c(cfg)?;
            match settings.format {
                Format::Csv => estimate.write_csv(&mut sink)?,
                Format::Json => write_json(&mut sink, &estimate)?,
            }
        }
        Mode::PartitionDump => dump_partitions(cfg, &mut sink)?,
        Mode::PdCheck => {
            let report = run_pd_check(cfg)?;
            match settings.format {
                Format::Csv => report.write_csv(&mut sink)?,
                Format::Json => write_json(&mut sink, &report)?,
            }
        }
    }
    sink.flush()?;
    Ok(())
}

fn write_json(w: &mut impl Write, value: &impl serde::Serialize) -> Result<(), ExperimentError> {
    serde_json::to_writer_pretty(&mut *w, value)
        .map_err(|e| ExperimentError::Config(format!("serialise: {e}")))?;
    w.write_all(b"\n")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let settings = match merge(cli) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = settings.cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(&settings) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
