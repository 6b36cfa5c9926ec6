//! Launch-time sweeps: one isolated simulation per (nnode, nproc) cell.

use rayon::prelude::*;

use crate::launchmodel::{LaunchBreakdown, LaunchRecord};
use crate::sim::{SimError, Simulation};
use crate::simcore::SimTime;
use crate::workload::{Scenario, SweepGrid};

use super::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub nnode: u32,
    pub nproc: u32,
    pub total_procs: u64,
    pub launch_time: SimTime,
    pub breakdown: LaunchBreakdown,
}

impl SweepRow {
    pub fn rate(&self) -> f64 {
        self.total_procs as f64 / self.launch_time.as_secs_f64()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Cells that do not fit the cluster.
    pub skipped: Vec<(u32, u32)>,
}

/// Runs one cell on an otherwise idle cluster and returns its launch record.
pub fn run_cell(scenario: &Scenario, app: &str, nnode: u32, nproc: u32) -> Result<LaunchRecord, CliError> {
    let setup = scenario.cell_setup(app, nnode, nproc)?;
    let mut sim = Simulation::new(setup)?;
    sim.run(None)?;
    let record = sim
        .job_launch_records(1)
        .into_iter()
        .next()
        .cloned()
        .ok_or_else(|| SimError::Invariant(format!("cell {nnode}x{nproc} produced no launch")))?;
    Ok(record)
}

fn row(scenario: &Scenario, grid: &SweepGrid, nnode: u32, nproc: u32) -> Result<SweepRow, CliError> {
    let mut total = 0u64;
    let mut breakdown = LaunchBreakdown::default();
    for _ in 0..grid.repetitions {
        let rec = run_cell(scenario, &grid.app, nnode, nproc)?;
        total += rec.launch_time().map_err(SimError::from)?.as_micros();
        breakdown = rec.breakdown().map_err(SimError::from)?;
    }
    Ok(SweepRow {
        nnode,
        nproc,
        total_procs: nnode as u64 * nproc as u64,
        launch_time: SimTime::from_micros(total / grid.repetitions as u64),
        breakdown,
    })
}

/// Runs every feasible cell on a pool of `workers` threads. Rows come back
/// in grid order whatever the worker count.
pub fn run_sweep(scenario: &Scenario, grid: &SweepGrid, workers: usize) -> Result<SweepOutcome, CliError> {
    let (cells, skipped): (Vec<_>, Vec<_>) =
        grid.cells().into_iter().partition(|&(n, p)| scenario.cell_is_feasible(n, p));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let rows =
        pool.install(|| cells.par_iter().map(|&(n, p)| row(scenario, grid, n, p)).collect::<Result<Vec<_>, _>>())?;
    Ok(SweepOutcome { rows, skipped })
}
