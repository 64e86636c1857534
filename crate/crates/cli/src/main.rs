use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nested_msf::harness::{self, ExperimentConfig};
use nested_msf::{Error, Method};

const EXIT_CONFIG: u8 = 2;
const EXIT_COLLAPSE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "nested-msf",
    version,
    about = "Nested smoothing for two-scale Lorenz 96 twin experiments"
)]
struct Cli {
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, global = true, env = "NESTED_MSF_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground truth and observations only.
    Simulate(ExperimentArgs),
    /// Run the full experiment: data, smoother, metrics and summary.
    Run(ExperimentArgs),
    /// Recompute metrics and summary from the CSVs of a `run` directory.
    Evaluate {
        /// Output directory of a previous `run`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle and invariant checks.
    Selftest,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    /// Output directory (overrides `experiment.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replications: Option<usize>,
    /// Also write the true fast path at every micro step.
    #[arg(long)]
    store_micro: bool,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
        }
        if let Some(m) = self.method {
            cfg.method.method = m;
        }
        if let Some(r) = self.replications {
            cfg.experiment.replications = r;
        }
        if let Some(o) = &self.out {
            cfg.experiment.out_dir = o.clone();
        }
        cfg.experiment.store_micro |= self.store_micro;
        cfg.validate()?;
        let out = cfg.experiment.out_dir.clone();
        Ok((cfg, out))
    }
}

fn config_failure(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG)
}

fn run(args: &ExperimentArgs) -> anyhow::Result<ExitCode> {
    let (cfg, out) = match args.resolve() {
        Ok(r) => r,
        Err(e) => return Ok(config_failure(e)),
    };
    let report = harness::run_experiment(&cfg, &out)
        .with_context(|| format!("experiment in {}", out.display()))?;
    let manifest = out.join("manifest.json");
    for r in report.results.iter().filter(|r| !r.completed()) {
        eprintln!(
            "replication {} failed: {}",
            r.index,
            r.error.as_deref().unwrap_or("")
        );
    }
    if report.all_failed() {
        eprintln!("all replications failed; see {}", manifest.display());
        return Ok(ExitCode::from(EXIT_COLLAPSE));
    }
    let s = &report.summary;
    println!(
        "{} N={} J={}: {}/{} replications completed in {:.1} s; summary in {}",
        s.method,
        s.n,
        s.j,
        s.replications_ok,
        s.replications,
        s.runtime_s,
        out.join("summary.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn simulate(args: &ExperimentArgs) -> anyhow::Result<ExitCode> {
    let (cfg, out) = match args.resolve() {
        Ok(r) => r,
        Err(e) => return Ok(config_failure(e)),
    };
    let manifest = harness::simulate(&cfg, &out)?;
    println!(
        "wrote {} replications of {} steps to {}",
        manifest.replications.len(),
        manifest.steps,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn evaluate(out: &Path) -> anyhow::Result<ExitCode> {
    let ev = harness::evaluate(out).with_context(|| format!("evaluating {}", out.display()))?;
    println!(
        "{} runs: max metric difference {:.3e}, max summary difference {:.3e}, {} missing mismatches",
        ev.runs, ev.max_metric_diff, ev.max_summary_diff, ev.mismatched_missing
    );
    Ok(if ev.matches(1e-12) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn selftest() -> ExitCode {
    let checks = harness::selftest();
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Run(a) => run(a),
        Command::Evaluate { out } => evaluate(out),
        Command::Selftest => Ok(selftest()),
    }
}
