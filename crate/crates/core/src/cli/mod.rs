//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration/usage/io error or skipped sweep
//! cells, 2 internal invariant violation.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::launchmodel::LaunchMode;
use crate::sched::{PolicyKind, SchedError};
use crate::sim::{SimError, Simulation};
use crate::workload::{self, ConfigError, Scenario, SweepGrid};

pub mod metrics;
pub mod report;
pub mod sweep;

use metrics::RunSummary;
use report::Format;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write `{path}`: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("skipped {} infeasible cell(s): {}", .0.len(), fmt_cells(.0))]
    Infeasible(Vec<(u32, u32)>),
}

fn fmt_cells(cells: &[(u32, u32)]) -> String {
    cells.iter().map(|(n, p)| format!("{n}x{p}")).collect::<Vec<_>>().join(", ")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            // a reservation that cannot be booked is a configuration problem
            CliError::Sim(SimError::Sched(SchedError::ReservationRejected { .. })) => 1,
            CliError::Sim(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ilaunch", version, about = "Interactive launch simulator for shared HPC clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario: a job workload, or a launch sweep if the scenario defines one.
    Simulate(RunArgs),
    /// Run a launch-time grid, one isolated simulation per cell.
    Sweep(SweepArgs),
    /// List the built-in scenarios.
    ListBuiltins,
    /// Parse a scenario and print the resolved configuration.
    Validate(Source),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Scenario file (TOML).
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long, value_name = "NAME")]
    builtin: Option<String>,
}

impl Source {
    fn load(&self) -> Result<Scenario, ConfigError> {
        match (&self.scenario, &self.builtin) {
            (Some(path), _) => workload::load_scenario(path),
            (None, Some(name)) => workload::builtin(name),
            (None, None) => unreachable!("clap enforces one source"),
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Write the event trace to this file (single runs only).
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Parallel workers for sweeps.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Stop the simulation at this time.
    #[arg(long, value_name = "SECONDS")]
    horizon: Option<f64>,
    /// Override the scheduling policy.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Override the launch mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Node counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    nnode: Vec<u32>,
    /// Processes per node, comma separated.
    #[arg(long, value_delimiter = ',')]
    nproc: Vec<u32>,
    /// Application to launch.
    #[arg(long)]
    app: Option<String>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum PolicyArg {
    AllBatch,
    BatchWithReservations,
    InteractiveWithLimits,
    AllImmediate,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::AllBatch => PolicyKind::AllBatch,
            PolicyArg::BatchWithReservations => PolicyKind::BatchWithReservations,
            PolicyArg::InteractiveWithLimits => PolicyKind::InteractiveWithLimits,
            PolicyArg::AllImmediate => PolicyKind::AllImmediate,
        }
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum ModeArg {
    TwoTier,
    SshTree,
    PerProcess,
}

impl From<ModeArg> for LaunchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TwoTier => LaunchMode::TwoTier,
            ModeArg::SshTree => LaunchMode::SshTree,
            ModeArg::PerProcess => LaunchMode::PerProcess,
        }
    }
}

impl RunArgs {
    fn scenario(&self) -> Result<Scenario, CliError> {
        let mut s = self.source.load()?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(h) = self.horizon {
            s.horizon_s = Some(h);
        }
        if let Some(p) = self.policy {
            s.policy = p.into();
        }
        if let Some(m) = self.mode {
            s.launch.mode = m.into();
        }
        s.validate()?;
        Ok(s)
    }

    fn emit(&self, bytes: &[u8], stdout: &mut dyn Write) -> Result<(), CliError> {
        let (path, result) = match &self.out {
            Some(path) => (path.display().to_string(), std::fs::write(path, bytes)),
            None => ("<stdout>".to_string(), stdout.write_all(bytes)),
        };
        result.map_err(|source| CliError::Io { path, source })
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let out_err = |source| CliError::Io { path: "<stdout>".into(), source };
    match command {
        Command::ListBuiltins => stdout.write_all(workload::builtin_listing().as_bytes()).map_err(out_err),
        Command::Validate(source) => {
            let s = source.load()?;
            stdout.write_all(s.to_toml().as_bytes()).map_err(out_err)
        }
        Command::Simulate(args) => {
            let s = args.scenario()?;
            match &s.sweep {
                Some(grid) => sweep_cmd(&args, &s, grid.clone(), stdout, stderr),
                None => simulate_jobs(&args, &s, stdout, stderr),
            }
        }
        Command::Sweep(a) => {
            let s = a.run.scenario()?;
            let mut grid = s.sweep.clone().unwrap_or_default();
            if !a.nnode.is_empty() {
                grid.nnode = a.nnode.clone();
            }
            if !a.nproc.is_empty() {
                grid.nproc = a.nproc.clone();
            }
            if let Some(app) = &a.app {
                grid.app = app.clone();
            }
            let s = Scenario { sweep: Some(grid.clone()), ..s };
            s.validate()?;
            sweep_cmd(&a.run, &s, grid, stdout, stderr)
        }
    }
}

fn open_trace(path: &PathBuf) -> Result<Box<dyn Write + Send>, CliError> {
    let f = File::create(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })?;
    Ok(Box::new(BufWriter::new(f)))
}

fn simulate_jobs(args: &RunArgs, s: &Scenario, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let mut sim = Simulation::new(s.setup()?)?;
    if let Some(path) = &args.trace {
        sim.set_trace(open_trace(path)?);
    }
    let end = sim.run(s.horizon())?;
    let outcomes = sim.outcomes();
    let summary = RunSummary::new(&outcomes, sim.utilization_trace(), sim.backlog_trace(), end);
    log::info!(
        "{}: {} jobs, {} completed, {} events, ended at {end}",
        s.name,
        summary.jobs,
        summary.completed,
        sim.events_processed()
    );
    let _ = writeln!(
        stderr,
        "{} jobs: {} completed, {} rejected, {} unfinished; utilization {:.4}",
        summary.jobs,
        summary.completed,
        summary.rejected_limit
            + summary.rejected_resources
            + summary.rejected_infeasible
            + summary.rejected_reservation,
        summary.unfinished,
        summary.utilization.unwrap_or(0.0)
    );
    drop(sim);
    args.emit(&report::jobs_report(&s.name, s.seed, &outcomes, &summary, args.format), stdout)
}

fn sweep_cmd(
    args: &RunArgs,
    s: &Scenario,
    grid: SweepGrid,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), CliError> {
    if let Some(trace) = &args.trace {
        let cells = grid.cells();
        let &[(n, p)] = cells.as_slice() else {
            return Err(CliError::Usage("--trace needs a single simulation; restrict the grid to one cell".into()));
        };
        if s.cell_is_feasible(n, p) {
            let mut sim = Simulation::new(s.cell_setup(&grid.app, n, p)?)?;
            sim.set_trace(open_trace(trace)?);
            sim.run(None)?;
        }
    }
    let outcome = sweep::run_sweep(s, &grid, args.workers)?;
    for r in &outcome.rows {
        log::debug!("cell {}x{}: T = {} s", r.nnode, r.nproc, r.launch_time);
    }
    args.emit(&report::sweep_report(&s.name, &grid.app, &outcome, args.format), stdout)?;
    if !outcome.skipped.is_empty() {
        let err = CliError::Infeasible(outcome.skipped);
        let _ = writeln!(stderr, "warning: {err}");
        return Err(err);
    }
    Ok(())
}
