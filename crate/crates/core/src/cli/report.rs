//! CSV and JSON serialization of run results.
//!
//! Seconds are written with six fractional digits so values round-trip to
//! the microsecond. Column sets are tied to [`SCHEMA_VERSION`].

use serde::Serialize;

use crate::sim::JobOutcome;
use crate::simcore::SimTime;

use super::metrics::RunSummary;
use super::sweep::SweepOutcome;

pub const SCHEMA_VERSION: u32 = 1;

pub const SWEEP_HEADER: [&str; 5] = ["nnode", "nproc", "total_procs", "launch_time_s", "rate_procs_per_s"];

pub const JOBS_HEADER: [&str; 11] = [
    "job_id",
    "user",
    "app",
    "interactive",
    "state",
    "reject_reason",
    "submit_s",
    "attempt_delay_s",
    "pending_s",
    "launch_s",
    "run_s",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

fn secs(t: SimTime) -> String {
    format!("{:.6}", t.as_secs_f64())
}

fn opt_secs(t: Option<SimTime>) -> String {
    t.map(secs).unwrap_or_default()
}

/// Exact decimal seconds for JSON: microseconds / 1e6 is the nearest f64.
fn json_secs(t: SimTime) -> f64 {
    t.as_micros() as f64 / 1e6
}

fn rate(r: f64) -> String {
    format!("{r:.6}")
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

#[derive(Serialize)]
struct SweepJson<'a> {
    schema_version: u32,
    kind: &'static str,
    scenario: &'a str,
    app: &'a str,
    rows: Vec<SweepRowJson>,
    skipped: Vec<[u32; 2]>,
}

#[derive(Serialize)]
struct SweepRowJson {
    nnode: u32,
    nproc: u32,
    total_procs: u64,
    launch_time_s: f64,
    rate_procs_per_s: f64,
    fs_wait_fraction: f64,
}

pub fn sweep_report(scenario: &str, app: &str, outcome: &SweepOutcome, format: Format) -> Vec<u8> {
    match format {
        Format::Csv => csv_bytes(
            &SWEEP_HEADER,
            outcome.rows.iter().map(|r| {
                [
                    r.nnode.to_string(),
                    r.nproc.to_string(),
                    r.total_procs.to_string(),
                    secs(r.launch_time),
                    rate(r.rate()),
                ]
            }),
        ),
        Format::Json => json_bytes(&SweepJson {
            schema_version: SCHEMA_VERSION,
            kind: "sweep",
            scenario,
            app,
            rows: outcome
                .rows
                .iter()
                .map(|r| SweepRowJson {
                    nnode: r.nnode,
                    nproc: r.nproc,
                    total_procs: r.total_procs,
                    launch_time_s: json_secs(r.launch_time),
                    rate_procs_per_s: r.rate(),
                    fs_wait_fraction: r.breakdown.fs_fraction(),
                })
                .collect(),
            skipped: outcome.skipped.iter().map(|&(n, p)| [n, p]).collect(),
        }),
    }
}

#[derive(Serialize)]
struct JobsJson<'a> {
    schema_version: u32,
    kind: &'static str,
    scenario: &'a str,
    seed: u64,
    summary: &'a RunSummary,
    jobs: Vec<JobJson<'a>>,
}

#[derive(Serialize)]
struct JobJson<'a> {
    job_id: u64,
    user: &'a str,
    app: &'a str,
    interactive: bool,
    state: String,
    reject_reason: Option<String>,
    submit_s: f64,
    attempt_delay_s: Option<f64>,
    pending_s: f64,
    launch_s: Option<f64>,
    run_s: Option<f64>,
}

pub fn jobs_report(
    scenario: &str,
    seed: u64,
    outcomes: &[JobOutcome],
    summary: &RunSummary,
    format: Format,
) -> Vec<u8> {
    match format {
        Format::Csv => csv_bytes(
            &JOBS_HEADER,
            outcomes.iter().map(|o| {
                [
                    o.job.to_string(),
                    o.user.clone(),
                    o.app.clone(),
                    o.interactive.to_string(),
                    o.state.to_string(),
                    o.reject_reason.map(|r| r.to_string()).unwrap_or_default(),
                    secs(o.submit),
                    opt_secs(o.attempt_delay),
                    secs(o.pending),
                    opt_secs(o.launch),
                    opt_secs(o.run),
                ]
            }),
        ),
        Format::Json => json_bytes(&JobsJson {
            schema_version: SCHEMA_VERSION,
            kind: "jobs",
            scenario,
            seed,
            summary,
            jobs: outcomes
                .iter()
                .map(|o| JobJson {
                    job_id: o.job,
                    user: &o.user,
                    app: &o.app,
                    interactive: o.interactive,
                    state: o.state.to_string(),
                    reject_reason: o.reject_reason.map(|r| r.to_string()),
                    submit_s: json_secs(o.submit),
                    attempt_delay_s: o.attempt_delay.map(json_secs),
                    pending_s: json_secs(o.pending),
                    launch_s: o.launch.map(json_secs),
                    run_s: o.run.map(json_secs),
                })
                .collect(),
        }),
    }
}
