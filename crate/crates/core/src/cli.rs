//! `ntxb` command-line front end.
//!
//! Exit codes: 0 success, 1 scientific failure (bound violation in `verify`,
//! divergence in `train`, threshold breach in `gradcheck`), 2 usage or
//! configuration error, 3 bound violated during training.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bounds::{monte_carlo_verify, VerifyGrid, VIOLATION_SLACK};
use crate::error::Error;
use crate::gradcheck::{end_to_end_trial, loss_level_trial, TrialResult};
use crate::loss::LossBreakdown;
use crate::simclr::{train_with, TrainConfig, TraceRecord};
use crate::trace::{aggregate, gap_table_csv, parse_trace, series_csv, TraceRow, METRICS, TRACE_HEADER};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_BOUND_VIOLATION: u8 = 3;

/// Environment variable capping verify-grid worker threads.
pub const THREADS_ENV: &str = "NTXB_THREADS";

pub const VERIFY_SUMMARY_FILE: &str = "verify_summary.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const TRAIN_SUMMARY_FILE: &str = "summary.json";
pub const GRADCHECK_FILE: &str = "gradcheck_report.json";
pub const GAP_TABLE_FILE: &str = "gap_table.csv";
pub const REPORT_FILE: &str = "report.json";
pub const SERIES_DIR: &str = "series";

#[derive(Debug, Parser)]
#[command(name = "ntxb", version, about = "NT-Xent loss bound verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo check of both similarity bounds over a parameter grid.
    Verify {
        /// JSON config; the built-in grid is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Finite-difference checks of the loss gradient and of end-to-end
    /// backpropagation through a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a JSON report into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Perturbs one analytic gradient entry by 1e-2 (test hook).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Train the toy SimCLR model and record the bounds at every step.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a training trace into per-metric series and a gap table.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A usage or configuration problem; always exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl<E: std::fmt::Display> From<E> for UsageError {
    fn from(e: E) -> Self {
        Self(e.to_string())
    }
}

type CmdResult = Result<u8, UsageError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Verify { config, seed, out } => cmd_verify(config.as_deref(), seed, &out),
        Command::Gradcheck {
            trials,
            seed,
            out,
            corrupt_gradient,
        } => cmd_gradcheck(trials, seed, out.as_deref(), corrupt_gradient),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Report { trace, out } => cmd_report(&trace, &out),
    };
    result.unwrap_or_else(|UsageError(msg)| {
        eprintln!("error: {msg}");
        EXIT_USAGE
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, UsageError> {
    let text = fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), UsageError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| UsageError(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), UsageError> {
    fs::create_dir_all(dir).map_err(|e| UsageError(format!("cannot create {}: {e}", dir.display())))
}

/// Config file for `ntxb verify`. Missing fields take their defaults;
/// unknown fields are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub grid: VerifyGrid,
}

fn thread_cap() -> Result<Option<usize>, UsageError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(UsageError(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(UsageError(format!("{THREADS_ENV}: {e}"))),
    }
}

fn cmd_verify(config: Option<&Path>, seed: Option<u64>, out: &Path) -> CmdResult {
    let mut cfg: VerifyConfig = match config {
        Some(path) => read_json(path)?,
        None => VerifyConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.grid.validate()?;
    let threads = thread_cap()?;
    let summary = monte_carlo_verify(&cfg.grid, cfg.seed, threads)?;

    create_dir(out)?;
    write_json(&out.join(VERIFY_SUMMARY_FILE), &summary)?;
    println!(
        "verify: {} trials in {} cells, violations paper={} strict={} ordering={}, min gaps paper={:e} strict={:e}",
        summary.trials,
        summary.cells.len(),
        summary.violations_paper,
        summary.violations_strict,
        summary.violations_ordering,
        summary.min_paper_gap,
        summary.min_strict_gap
    );
    Ok(if summary.passed() { EXIT_OK } else { EXIT_FAILURE })
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    seed: u64,
    trials: usize,
    passed: bool,
    loss_level: Vec<TrialResult>,
    end_to_end: Vec<TrialResult>,
}

fn cmd_gradcheck(trials: usize, seed: u64, out: Option<&Path>, corrupt: bool) -> CmdResult {
    if trials == 0 {
        return Err(UsageError("--trials must be at least 1".into()));
    }
    let bump = |g: &mut [f64]| {
        if corrupt {
            g[0] += 1e-2;
        }
    };
    let mut loss_level = Vec::with_capacity(trials);
    let mut end_to_end = Vec::with_capacity(trials);
    for t in 0..trials {
        loss_level.push(loss_level_trial(seed, t, bump)?);
        end_to_end.push(end_to_end_trial(seed, t, bump)?);
    }
    for r in loss_level.iter().chain(&end_to_end) {
        println!(
            "trial {:>3} {:<40} worst #{:<4} analytic {:+.6e} numeric {:+.6e} error {:.3e} (tol {:.0e}) {}",
            r.trial,
            r.description,
            r.worst.index,
            r.worst.analytic,
            r.worst.numeric,
            r.worst.error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let passed = loss_level.iter().chain(&end_to_end).all(|r| r.passed);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(
            &dir.join(GRADCHECK_FILE),
            &GradcheckReport {
                seed,
                trials,
                passed,
                loss_level,
                end_to_end,
            },
        )?;
    }
    Ok(if passed { EXIT_OK } else { EXIT_FAILURE })
}

/// `summary.json` written by `ntxb train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub status: TrainStatus,
    pub steps_completed: usize,
    pub initial_loss: Option<LossBreakdown>,
    pub final_loss: Option<LossBreakdown>,
    pub initial_avg_pos_sim: Option<f64>,
    pub final_avg_pos_sim: Option<f64>,
    pub final_paper_gap: Option<f64>,
    pub final_strict_gap: Option<f64>,
    pub min_paper_gap: Option<f64>,
    pub min_strict_gap: Option<f64>,
    /// Some step had all latent rows (numerically) identical.
    pub collapse: bool,
    /// Some step had a gap below `-1e-9`.
    pub bound_violated: bool,
    pub error: Option<String>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    NonFiniteLoss,
}

impl TrainSummary {
    fn new(cfg: &TrainConfig, trace: &[TraceRecord], error: Option<&Error>) -> Self {
        let first = trace.first();
        let last = trace.last();
        let min = |f: fn(&TraceRecord) -> f64| trace.iter().map(f).reduce(f64::min);
        Self {
            status: if error.is_some() {
                TrainStatus::NonFiniteLoss
            } else {
                TrainStatus::Completed
            },
            steps_completed: trace.len(),
            initial_loss: first.map(|r| r.loss),
            final_loss: last.map(|r| r.loss),
            initial_avg_pos_sim: first.map(|r| r.avg_pos_sim),
            final_avg_pos_sim: last.map(|r| r.avg_pos_sim),
            final_paper_gap: last.map(|r| r.paper_gap),
            final_strict_gap: last.map(|r| r.strict_gap),
            min_paper_gap: min(|r| r.paper_gap),
            min_strict_gap: min(|r| r.strict_gap),
            collapse: trace.iter().any(|r| r.collapsed),
            bound_violated: trace
                .iter()
                .any(|r| r.paper_gap < -VIOLATION_SLACK || r.strict_gap < -VIOLATION_SLACK),
            error: error.map(ToString::to_string),
            config: cfg.clone(),
        }
    }
}

fn cmd_train(config: &Path, out: &Path) -> CmdResult {
    let cfg: TrainConfig = read_json(config)?;
    cfg.validate()?;
    create_dir(out)?;

    let trace_path = out.join(TRACE_FILE);
    let file = File::create(&trace_path)
        .map_err(|e| UsageError(format!("cannot write {}: {e}", trace_path.display())))?;
    let mut writer = BufWriter::new(file);
    let mut io_error = writeln!(writer, "{TRACE_HEADER}").err();
    let result = train_with(&cfg, |record| {
        if io_error.is_none() {
            io_error = writeln!(writer, "{}", TraceRow::from(record).to_csv_line()).err();
        }
    });
    if let Some(e) = io_error.or_else(|| writer.flush().err()) {
        return Err(UsageError(format!("cannot write {}: {e}", trace_path.display())));
    }

    let (summary, diverged) = match &result {
        Ok(outcome) => (TrainSummary::new(&cfg, &outcome.trace, None), false),
        Err(abort) => (TrainSummary::new(&cfg, &abort.trace, Some(&abort.error)), true),
    };
    write_json(&out.join(TRAIN_SUMMARY_FILE), &summary)?;

    if diverged {
        eprintln!(
            "train: {} after {} steps",
            summary.error.as_deref().unwrap_or("aborted"),
            summary.steps_completed
        );
        return Ok(EXIT_FAILURE);
    }
    println!(
        "train: {} steps, loss {:.6} -> {:.6}, avg_pos_sim {:.6} -> {:.6}, min gaps paper={:e} strict={:e}{}",
        summary.steps_completed,
        summary.initial_loss.map_or(f64::NAN, |l| l.total),
        summary.final_loss.map_or(f64::NAN, |l| l.total),
        summary.initial_avg_pos_sim.unwrap_or(f64::NAN),
        summary.final_avg_pos_sim.unwrap_or(f64::NAN),
        summary.min_paper_gap.unwrap_or(f64::NAN),
        summary.min_strict_gap.unwrap_or(f64::NAN),
        if summary.collapse { ", collapse detected" } else { "" }
    );
    if summary.bound_violated {
        eprintln!("train: similarity bound violated during training");
        return Ok(EXIT_BOUND_VIOLATION);
    }
    Ok(EXIT_OK)
}

fn cmd_report(trace: &Path, out: &Path) -> CmdResult {
    let text = fs::read_to_string(trace)
        .map_err(|e| UsageError(format!("cannot read {}: {e}", trace.display())))?;
    let rows = parse_trace(&text).map_err(|e| UsageError(format!("{}: {e}", trace.display())))?;
    let agg = aggregate(&rows);

    let series_dir = out.join(SERIES_DIR);
    create_dir(&series_dir)?;
    for (i, metric) in METRICS.iter().enumerate() {
        let path = series_dir.join(format!("{metric}.csv"));
        fs::write(&path, series_csv(&rows, i))
            .map_err(|e| UsageError(format!("cannot write {}: {e}", path.display())))?;
    }
    let table = out.join(GAP_TABLE_FILE);
    fs::write(&table, gap_table_csv(&agg))
        .map_err(|e| UsageError(format!("cannot write {}: {e}", table.display())))?;
    write_json(&out.join(REPORT_FILE), &agg)?;
    println!(
        "report: {} steps; paper_gap min {:e} mean {:e} final {:e}; strict_gap min {:e} mean {:e} final {:e}",
        agg.steps,
        agg.paper_gap.min,
        agg.paper_gap.mean,
        agg.paper_gap.last,
        agg.strict_gap.min,
        agg.strict_gap.mean,
        agg.strict_gap.last
    );
    Ok(EXIT_OK)
}
