//! Command-line driver: dataset generation, grid training, theory checks
//! and figures.

pub mod config;
pub mod experiment;
pub mod figures;
pub mod svg;
pub mod verify;

use std::fmt;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use icrlab::checks::CheckReport;
use icrlab::io::write_reports;

use crate::config::{parse_model, parse_optimizer, ExperimentSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    /// Failing check reports, already printed.
    Check(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Check(_) => EXIT_CHECK_FAILED,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Check(n) => write!(f, "{n} check(s) failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<icrlab::Error> for CliError {
    fn from(e: icrlab::Error) -> Self {
        match e {
            icrlab::Error::Io(_) | icrlab::Error::Csv(_) | icrlab::Error::Parse(_) => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "icrlab", version, about = "Train one-layer transformers on in-context recall and check their convergence bounds")]
#[command(after_help = ExperimentSpec::key_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write training, population-evaluation and OOD datasets with manifests.
    Generate(Common),
    /// Train models and write trajectories and checkpoints.
    Train(Common),
    /// Run the applicable checks on every recorded run.
    Check(Common),
    /// Write loss curves, logit plots and the checkmark matrix.
    Figures(Common),
    /// Generate, train the grid noiseless and at every noise level, check and plot.
    ReproduceAll(Common),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Configuration file of `key = value` lines (keys listed below).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Use this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use this single noise level (0 for the noiseless task).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Use this single model, e.g. Reparam-Linear or Origin-Softmax.
    #[arg(long)]
    pub model: Option<String>,
    /// Learning rate.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Optimizer: ngd (normalized) or gd (plain).
    #[arg(long)]
    pub optimizer: Option<String>,
}

impl Common {
    /// The configuration file (if any) with the flags applied on top.
    pub fn resolve(&self) -> Result<ExperimentSpec, CliError> {
        let mut spec = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                ExperimentSpec::parse(&text)?
            }
            None => ExperimentSpec::default(),
        };
        if let Some(s) = self.seed {
            spec.seeds = vec![s];
        }
        if let Some(a) = self.alpha {
            spec.alphas = vec![a];
        }
        if let Some(m) = &self.model {
            spec.models = vec![parse_model(m)?];
        }
        if let Some(e) = self.eta {
            spec.eta = e;
        }
        if let Some(t) = self.steps {
            spec.steps = t;
        }
        if let Some(o) = &self.optimizer {
            spec.optimizer = parse_optimizer(o)?;
        }
        spec.out = self.out.clone();
        spec.validate()?;
        Ok(spec)
    }
}

fn write_resolved(spec: &ExperimentSpec, name: &str) -> Result<(), CliError> {
    fs::create_dir_all(&spec.out)?;
    fs::write(spec.out.join(name), spec.to_text())?;
    Ok(())
}

pub fn cmd_generate(spec: &ExperimentSpec) -> Result<(), CliError> {
    write_resolved(spec, "generate.config.txt")?;
    for &a in &spec.alphas {
        for &s in &spec.seeds {
            let dir = experiment::generate(spec, a, s)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

pub fn cmd_train(spec: &ExperimentSpec) -> Result<(), CliError> {
    write_resolved(spec, "train.config.txt")?;
    for dir in experiment::train_grid(spec, &spec.alphas)? {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

/// Runs every applicable check, writes `checks.csv` and prints one line
/// per report. Fails with [`CliError::Check`] if any report fails.
pub fn cmd_check(spec: &ExperimentSpec) -> Result<Vec<CheckReport>, CliError> {
    let runs = experiment::load_runs(&spec.out)?;
    if runs.is_empty() {
        eprintln!("warning: no runs under {}; nothing to check", spec.out.join("runs").display());
        return Ok(Vec::new());
    }
    let reports: Vec<CheckReport> = runs.iter().flat_map(verify::run_checks).collect();
    write_reports(&spec.out.join("checks.csv"), &reports)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        return Err(CliError::Check(failed));
    }
    Ok(reports)
}

pub fn cmd_figures(spec: &ExperimentSpec) -> Result<(), CliError> {
    let runs = experiment::load_runs(&spec.out)?;
    for f in figures::write_figures(&spec.out, &runs, spec.table_alpha)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

pub fn cmd_reproduce_all(spec: &ExperimentSpec) -> Result<(), CliError> {
    let mut alphas = vec![0.0];
    alphas.extend(spec.alphas.iter().copied().filter(|&a| a > 0.0));
    let full = ExperimentSpec { alphas: alphas.clone(), ..spec.clone() };
    write_resolved(&full, "reproduce-all.config.txt")?;
    cmd_generate(&full)?;
    experiment::train_grid(&full, &alphas)?;
    cmd_figures(&full)?;
    cmd_check(&full).map(|_| ())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Generate(c) => c.resolve().and_then(|s| cmd_generate(&s)),
        Command::Train(c) => c.resolve().and_then(|s| cmd_train(&s)),
        Command::Check(c) => c.resolve().and_then(|s| cmd_check(&s).map(|_| ())),
        Command::Figures(c) => c.resolve().and_then(|s| cmd_figures(&s)),
        Command::ReproduceAll(c) => c.resolve().and_then(|s| cmd_reproduce_all(&s)),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
