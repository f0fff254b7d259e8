//! `hydrokam`: manifest-driven experiment runner.
//!
//! Exit codes: 0 when everything ran and every check passed, 1 on a failed
//! check or a runtime error, 2 on a configuration error.

mod check;
mod emit;
mod manifest;
mod run;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::emit::{RunRecord, RECORD_FILE};
use crate::manifest::ConfigError;

const WORKERS_ENV: &str = "HYDROKAM_WORKERS";

#[derive(Parser)]
#[command(name = "hydrokam", version, about = "Experiment runner for singular diffusion on the circle")]
struct Cli {
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON manifest.
    Run {
        manifest: PathBuf,
        /// Write results here instead of the manifest's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the quick invariant suite.
    Check {
        /// Only checks whose name contains this substring.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify and summarize run records found under a directory.
    Report { dir: PathBuf },
}

enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn cmd_run(manifest_path: &Path, out: Option<PathBuf>) -> Result<bool, Failure> {
    let m = manifest::parse_config(manifest_path).map_err(Failure::Config)?;
    let bytes = std::fs::read(manifest_path)
        .with_context(|| format!("cannot read {}", manifest_path.display()))?;
    let dir = out.unwrap_or_else(|| m.resolved_output_dir.clone());
    let mut m = m;
    m.resolved_output_dir = dir.clone();
    let start = Instant::now();
    let outputs = run::run_experiment(&m)?;
    let wall = start.elapsed().as_secs_f64();
    let (path, record) = emit::emit(&m, &bytes, &outputs, wall, &dir)?;
    print_checks(&record);
    println!("wrote {} ({} files, {wall:.2} s)", path.display(), record.files.len());
    Ok(record.passed)
}

fn print_checks(record: &RunRecord) {
    for c in &record.checks {
        println!(
            "{} {}: {:.3e} {} {:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.relation,
            c.threshold
        );
    }
}

fn cmd_check(filter: Option<&str>, seed: u64) -> bool {
    let checks = check::run_suite(filter, seed);
    for c in &checks {
        println!(
            "{} {}: {:.3e} {} {:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.relation,
            c.threshold
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    failed == 0
}

fn find_records(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_records(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RECORD_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// `Ok(None)` when no record exists.
fn cmd_report(dir: &Path) -> Result<Option<bool>> {
    let mut paths = Vec::new();
    find_records(dir, &mut paths).with_context(|| format!("cannot scan {}", dir.display()))?;
    if paths.is_empty() {
        eprintln!("no {RECORD_FILE} under {}", dir.display());
        return Ok(None);
    }
    let mut all_ok = true;
    for p in &paths {
        let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
        let record: RunRecord =
            serde_json::from_str(&text).with_context(|| format!("malformed record {}", p.display()))?;
        let base = p.parent().unwrap_or(Path::new("."));
        let problems = emit::verify(&record, base);
        let failed = record.checks.iter().filter(|c| !c.passed).count();
        let ok = problems.is_empty() && failed == 0;
        all_ok &= ok;
        println!(
            "{} {} [{}] {}: {} files, {} checks ({failed} failed), {:.2} s, input {}",
            if ok { "OK  " } else { "FAIL" },
            record.name,
            record.kind,
            base.display(),
            record.files.len(),
            record.checks.len(),
            record.wall_time_secs,
            &record.input_hash[..12.min(record.input_hash.len())]
        );
        for pr in problems {
            println!("    {pr}");
        }
    }
    Ok(Some(all_ok))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: {WORKERS_ENV} / --workers must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match cli.command {
        Command::Run { manifest, out } => match cmd_run(&manifest, out) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(Failure::Config(e)) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
            Err(Failure::Runtime(e)) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
        Command::Check { filter, seed } => {
            if cmd_check(filter.as_deref(), seed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Command::Report { dir } => match cmd_report(&dir) {
            Ok(Some(true)) => ExitCode::SUCCESS,
            Ok(Some(false)) => ExitCode::from(1),
            Ok(None) => ExitCode::from(2),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
