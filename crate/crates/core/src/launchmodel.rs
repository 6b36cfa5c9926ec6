//! Process launch pipeline for a dispatched job.
//!
//! Three mechanisms are modeled:
//!
//! * `TwoTier`: the scheduler sends one launcher command per node through a
//!   fan-out tree; each launcher forks its node's processes serially and
//!   backgrounds them.
//! * `SshTree`: same per-node spawning, but nodes are reached through a
//!   slower hierarchical remote-shell tree.
//! * `PerProcess`: the central scheduler dispatches every process on its own
//!   at a fixed rate.
//!
//! After forking, every process loads from local disk (contention free) and
//! then submits its central-filesystem requests as one batch. A process is
//! ready when its last request completes.
//!
//! The launch itself is a small state machine driven by [`LaunchStep`]
//! events; the full simulation and [`run_isolated`] share it.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{CentralFs, JobId, NodeId};
use crate::simcore::{Engine, EngineError, Event, EventPayload, Handler, SimTime, MICROS_PER_SEC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LaunchMode {
    #[default]
    TwoTier,
    SshTree,
    PerProcess,
}

impl fmt::Display for LaunchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LaunchMode::TwoTier => "two_tier",
            LaunchMode::SshTree => "ssh_tree",
            LaunchMode::PerProcess => "per_process",
        })
    }
}

/// Latency constants of the launch pipeline. Durations are in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingModel {
    /// Fan-out of the scheduler-to-node dispatch tree.
    pub fanout: u32,
    pub t_hop_s: f64,
    pub t_launcher_start_s: f64,
    /// Serial spawn cost per process within one node.
    pub t_fork_s: f64,
    pub ssh_fanout: u32,
    pub t_ssh_hop_s: f64,
    /// Central per-process dispatch rate, processes per second.
    pub dispatch_rate: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            fanout: 32,
            t_hop_s: 0.010,
            t_launcher_start_s: 0.050,
            t_fork_s: 0.002,
            ssh_fanout: 16,
            t_ssh_hop_s: 0.2,
            dispatch_rate: 200.0,
        }
    }
}

fn us(secs: f64) -> SimTime {
    SimTime::from_secs_f64(secs).unwrap_or(SimTime::ZERO)
}

impl TimingModel {
    /// Returns the name of the first offending field.
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.fanout < 2 {
            return Err("fanout");
        }
        if self.ssh_fanout < 2 {
            return Err("ssh_fanout");
        }
        let positive = [
            (self.t_hop_s, "t_hop_s"),
            (self.t_launcher_start_s, "t_launcher_start_s"),
            (self.t_fork_s, "t_fork_s"),
            (self.t_ssh_hop_s, "t_ssh_hop_s"),
            (self.dispatch_rate, "dispatch_rate"),
        ];
        for (v, name) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(name);
            }
        }
        Ok(())
    }

    fn tree(&self, mode: LaunchMode) -> (u32, SimTime) {
        match mode {
            LaunchMode::SshTree => (self.ssh_fanout, us(self.t_ssh_hop_s)),
            _ => (self.fanout, us(self.t_hop_s)),
        }
    }

    /// Time the `k`-th process (1-based) leaves the central dispatcher.
    pub fn per_process_offset(&self, k: u64) -> SimTime {
        SimTime::from_micros((k as f64 * MICROS_PER_SEC as f64 / self.dispatch_rate).round() as u64)
    }
}

/// Smallest level `l >= 1` such that `B + B^2 + ... + B^l >= node_index`.
pub fn dispatch_depth(node_index: u64, fanout: u32) -> u32 {
    assert!(node_index >= 1, "node index is 1-based");
    assert!(fanout >= 2, "fan-out must be at least 2");
    let b = fanout as u128;
    let target = node_index as u128;
    let (mut level, mut width, mut reach) = (1u32, b, b);
    while reach < target {
        level += 1;
        width *= b;
        reach += width;
    }
    level
}

/// Processes to start on one node, with the per-process central request
/// count already resolved against the node's cache state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeLaunch {
    pub node: NodeId,
    pub procs: u32,
    pub requests: u32,
}

/// Timeline of one process.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProcLaunch {
    pub node: NodeId,
    /// 1-based position of the node within the dispatch.
    pub node_pos: u32,
    /// 1-based spawn order within its node.
    pub local: u32,
    pub requests: u32,
    /// Launcher command (or per-process dispatch) received.
    pub received: SimTime,
    pub launcher_ready: SimTime,
    pub forked: SimTime,
    /// Local load finished and central requests submitted.
    pub enqueued: SimTime,
    /// Start of the filesystem busy period the request batch joined.
    pub fs_busy_start: SimTime,
    pub ready: SimTime,
}

impl ProcLaunch {
    pub fn fs_wait(&self) -> SimTime {
        self.ready - self.enqueued
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LaunchError {
    #[error("launch record has no processes")]
    Empty,
    #[error("launch record is not complete")]
    Incomplete,
    #[error("launch time is zero")]
    ZeroLaunchTime,
}

/// Critical-path split of a launch time. Components sum to `T_launch`.
///
/// The last-ready process finishes at the end of a filesystem busy period
/// whose first request came from some process of the job (the initiator).
/// Everything before the initiator's submission is attributed to its own
/// dispatch/launcher/fork/load path; the rest is filesystem time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LaunchBreakdown {
    pub dispatch: SimTime,
    pub launcher: SimTime,
    pub fork: SimTime,
    pub load: SimTime,
    pub fs: SimTime,
}

impl LaunchBreakdown {
    pub fn total(&self) -> SimTime {
        self.dispatch + self.launcher + self.fork + self.load + self.fs
    }

    pub fn fs_fraction(&self) -> f64 {
        let t = self.total().as_micros();
        if t == 0 {
            0.0
        } else {
            self.fs.as_micros() as f64 / t as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaunchRecord {
    pub job: JobId,
    pub mode: LaunchMode,
    pub dispatch_begin: SimTime,
    pub procs: Vec<ProcLaunch>,
}

impl LaunchRecord {
    pub fn ready_times(&self) -> impl Iterator<Item = SimTime> + '_ {
        self.procs.iter().map(|p| p.ready)
    }

    pub fn nodes(&self) -> u32 {
        self.procs.last().map(|p| p.node_pos).unwrap_or(0)
    }

    pub fn launch_time(&self) -> Result<SimTime, LaunchError> {
        let last = self.ready_times().max().ok_or(LaunchError::Empty)?;
        let t = last.saturating_sub(self.dispatch_begin);
        if t == SimTime::ZERO {
            return Err(LaunchError::ZeroLaunchTime);
        }
        Ok(t)
    }

    pub fn breakdown(&self) -> Result<LaunchBreakdown, LaunchError> {
        self.launch_time()?;
        let last =
            self.procs.iter().max_by_key(|p| (p.ready, std::cmp::Reverse(p.enqueued))).ok_or(LaunchError::Empty)?;
        let initiator = self
            .procs
            .iter()
            .filter(|p| p.enqueued >= last.fs_busy_start && p.enqueued <= last.enqueued)
            .min_by_key(|p| p.enqueued)
            .unwrap_or(last);
        Ok(LaunchBreakdown {
            dispatch: initiator.received - self.dispatch_begin,
            launcher: initiator.launcher_ready - initiator.received,
            fork: initiator.forked - initiator.launcher_ready,
            load: initiator.enqueued - initiator.forked,
            fs: last.ready - initiator.enqueued,
        })
    }
}

/// `(T_launch seconds, R_launch processes per second)`.
pub fn launch_metrics(record: &LaunchRecord) -> Result<(f64, f64), LaunchError> {
    let t = record.launch_time()?;
    let secs = t.as_secs_f64();
    Ok((secs, record.procs.len() as f64 / secs))
}

/// One transition of the launch state machine. Indices refer to node
/// positions (tree modes) or process indices (per-process dispatch and all
/// per-process steps), both 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaunchStep {
    DispatchArrival(u32),
    LauncherReady(u32),
    ProcForked(u32),
    LoadDone(u32),
    FsDone(u32),
}

/// In-flight launch of one dispatch.
#[derive(Clone, Debug)]
pub struct LaunchState {
    record: LaunchRecord,
    /// First process index of every node position.
    node_first: Vec<u32>,
    t_launcher_start: SimTime,
    t_fork: SimTime,
    t_load: SimTime,
    remaining: usize,
}

impl LaunchState {
    pub fn new(
        job: JobId,
        mode: LaunchMode,
        nodes: &[NodeLaunch],
        timing: &TimingModel,
        load_time: SimTime,
        dispatch_begin: SimTime,
    ) -> Self {
        let mut procs = Vec::with_capacity(nodes.iter().map(|n| n.procs as usize).sum());
        let mut node_first = Vec::with_capacity(nodes.len());
        for (pos, n) in nodes.iter().enumerate() {
            node_first.push(procs.len() as u32);
            for local in 1..=n.procs {
                procs.push(ProcLaunch {
                    node: n.node,
                    node_pos: pos as u32 + 1,
                    local,
                    requests: n.requests,
                    ..ProcLaunch::default()
                });
            }
        }
        let remaining = procs.len();
        LaunchState {
            record: LaunchRecord { job, mode, dispatch_begin, procs },
            node_first,
            t_launcher_start: us(timing.t_launcher_start_s),
            t_fork: us(timing.t_fork_s),
            t_load: load_time,
            remaining,
        }
    }

    pub fn record(&self) -> &LaunchRecord {
        &self.record
    }

    pub fn into_record(self) -> LaunchRecord {
        self.record
    }

    pub fn is_complete(&self) -> bool {
        self.remaining == 0
    }

    /// Events that start the launch, in scheduling order.
    pub fn initial_steps(&self, timing: &TimingModel) -> Vec<(SimTime, LaunchStep)> {
        let db = self.record.dispatch_begin;
        match self.record.mode {
            LaunchMode::TwoTier | LaunchMode::SshTree => {
                let (fanout, hop) = timing.tree(self.record.mode);
                (0..self.node_first.len() as u32)
                    .map(|pos| {
                        let depth = dispatch_depth(pos as u64 + 1, fanout) as u64;
                        (db + hop.times(depth), LaunchStep::DispatchArrival(pos))
                    })
                    .collect()
            }
            LaunchMode::PerProcess => (0..self.record.procs.len() as u32)
                .map(|p| (db + timing.per_process_offset(p as u64 + 1), LaunchStep::DispatchArrival(p)))
                .collect(),
        }
    }

    fn node_range(&self, pos: u32) -> std::ops::Range<usize> {
        let start = self.node_first[pos as usize] as usize;
        let end = self.node_first.get(pos as usize + 1).map(|&e| e as usize).unwrap_or(self.record.procs.len());
        start..end
    }

    /// Applies one step at `now`, pushing follow-up steps into `out`.
    pub fn advance(
        &mut self,
        step: LaunchStep,
        now: SimTime,
        fs: &mut CentralFs,
        out: &mut Vec<(SimTime, LaunchStep)>,
    ) {
        match step {
            LaunchStep::DispatchArrival(i) => match self.record.mode {
                LaunchMode::PerProcess => {
                    let p = &mut self.record.procs[i as usize];
                    p.received = now;
                    p.launcher_ready = now;
                    out.push((now + self.t_fork, LaunchStep::ProcForked(i)));
                }
                _ => {
                    for p in self.node_range(i) {
                        self.record.procs[p].received = now;
                    }
                    out.push((now + self.t_launcher_start, LaunchStep::LauncherReady(i)));
                }
            },
            LaunchStep::LauncherReady(pos) => {
                let range = self.node_range(pos);
                for (j, p) in range.enumerate() {
                    self.record.procs[p].launcher_ready = now;
                    out.push((now + self.t_fork.times(j as u64 + 1), LaunchStep::ProcForked(p as u32)));
                }
            }
            LaunchStep::ProcForked(p) => {
                self.record.procs[p as usize].forked = now;
                out.push((now + self.t_load, LaunchStep::LoadDone(p)));
            }
            LaunchStep::LoadDone(p) => {
                let proc = &mut self.record.procs[p as usize];
                proc.enqueued = now;
                let done = fs.enqueue(proc.requests, now);
                proc.fs_busy_start = if proc.requests == 0 { now } else { fs.busy_period_start() };
                out.push((done, LaunchStep::FsDone(p)));
            }
            LaunchStep::FsDone(p) => {
                self.record.procs[p as usize].ready = now;
                self.remaining -= 1;
            }
        }
    }
}

struct IsolatedStep(LaunchStep);

impl fmt::Display for IsolatedStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl EventPayload for IsolatedStep {
    fn kind(&self) -> &'static str {
        "launch-step"
    }
}

struct IsolatedLaunch<'a> {
    state: LaunchState,
    fs: &'a mut CentralFs,
    buf: Vec<(SimTime, LaunchStep)>,
}

impl Handler<IsolatedStep> for IsolatedLaunch<'_> {
    type Error = EngineError;

    fn handle(&mut self, ev: Event<IsolatedStep>, engine: &mut Engine<IsolatedStep>) -> Result<(), EngineError> {
        self.state.advance(ev.payload.0, ev.time, self.fs, &mut self.buf);
        for (t, s) in self.buf.drain(..) {
            engine.schedule(t, IsolatedStep(s))?;
        }
        Ok(())
    }
}

/// Launches one job on an otherwise idle pipeline sharing only `fs`.
pub fn run_isolated(
    job: JobId,
    mode: LaunchMode,
    nodes: &[NodeLaunch],
    timing: &TimingModel,
    load_time: SimTime,
    fs: &mut CentralFs,
    dispatch_begin: SimTime,
) -> Result<LaunchRecord, EngineError> {
    let state = LaunchState::new(job, mode, nodes, timing, load_time, dispatch_begin);
    let mut engine = Engine::new();
    for (t, s) in state.initial_steps(timing) {
        engine.schedule(t, IsolatedStep(s))?;
    }
    let mut h = IsolatedLaunch { state, fs, buf: Vec::new() };
    engine.run(&mut h, None)?;
    Ok(h.state.into_record())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n_nodes: u32, procs: u32, requests: u32) -> Vec<NodeLaunch> {
        (1..=n_nodes).map(|node| NodeLaunch { node, procs, requests }).collect()
    }

    fn launch(mode: LaunchMode, n_nodes: u32, procs: u32, requests: u32) -> LaunchRecord {
        let mut fs = CentralFs::new(20_000.0);
        run_isolated(
            1,
            mode,
            &uniform(n_nodes, procs, requests),
            &TimingModel::default(),
            SimTime::from_micros(100_000),
            &mut fs,
            SimTime::ZERO,
        )
        .unwrap()
    }

    #[test]
    fn depth_table() {
        assert_eq!(dispatch_depth(1, 32), 1);
        assert_eq!(dispatch_depth(32, 32), 1);
        assert_eq!(dispatch_depth(33, 32), 2);
        assert_eq!(dispatch_depth(512, 32), 2);
        assert_eq!(dispatch_depth(512, 16), 3);
        assert_eq!(dispatch_depth(272, 16), 2);
        assert_eq!(dispatch_depth(273, 16), 3);
    }

    #[test]
    fn single_process_two_tier() {
        let r = launch(LaunchMode::TwoTier, 1, 1, 3);
        assert_eq!(r.launch_time().unwrap(), SimTime::from_micros(162_150));
        let (t, rate) = launch_metrics(&r).unwrap();
        assert!((t - 0.16215).abs() < 1e-12);
        assert!((rate - 6.167129).abs() < 1e-6);
    }

    #[test]
    fn single_process_ssh_tree() {
        let r = launch(LaunchMode::SshTree, 1, 1, 3);
        assert_eq!(r.launch_time().unwrap(), SimTime::from_micros(352_150));
    }

    #[test]
    fn single_process_per_process_dispatch() {
        let r = launch(LaunchMode::PerProcess, 1, 1, 3);
        // two-tier minus tree hop and launcher start, plus 1/d_rate
        assert_eq!(r.launch_time().unwrap(), SimTime::from_micros(162_150 - 10_000 - 50_000 + 5_000));
    }

    #[test]
    fn ssh_tree_on_512_nodes_is_three_levels() {
        let r = launch(LaunchMode::SshTree, 512, 1, 3);
        let max_recv = r.procs.iter().map(|p| p.received).max().unwrap();
        assert_eq!(max_recv, SimTime::from_micros(600_000));
        let r = launch(LaunchMode::TwoTier, 512, 1, 3);
        let max_recv = r.procs.iter().map(|p| p.received).max().unwrap();
        assert_eq!(max_recv, SimTime::from_micros(20_000));
    }

    #[test]
    fn forks_are_serial_within_a_node() {
        let r = launch(LaunchMode::TwoTier, 1, 4, 0);
        let forks: Vec<u64> = r.procs.iter().map(|p| p.forked.as_micros()).collect();
        assert_eq!(forks, vec![62_000, 64_000, 66_000, 68_000]);
        // no central requests: ready right after the local load
        assert_eq!(r.procs[3].ready.as_micros(), 168_000);
    }

    #[test]
    fn metrics_guards() {
        let empty = LaunchRecord { job: 1, mode: LaunchMode::TwoTier, dispatch_begin: SimTime::ZERO, procs: vec![] };
        assert_eq!(launch_metrics(&empty), Err(LaunchError::Empty));
        let flat = LaunchRecord { procs: vec![ProcLaunch::default()], ..empty };
        assert_eq!(launch_metrics(&flat), Err(LaunchError::ZeroLaunchTime));
    }

    #[test]
    fn rate_is_procs_over_time() {
        let rate: f64 = 262_144.0 / 39.5;
        assert!((rate - 6636.56).abs() < 0.01);
    }

    #[test]
    fn breakdown_sums_to_launch_time() {
        for (n, p) in [(1, 1), (3, 4), (64, 32)] {
            let r = launch(LaunchMode::TwoTier, n, p, 3);
            let b = r.breakdown().unwrap();
            assert_eq!(b.total(), r.launch_time().unwrap());
        }
    }

    #[test]
    fn uncached_app_is_slower() {
        let cached = launch(LaunchMode::TwoTier, 1, 1, 3).launch_time().unwrap();
        let uncached = launch(LaunchMode::TwoTier, 1, 1, 1000).launch_time().unwrap();
        // 997 extra requests at 50us each
        assert_eq!(uncached - cached, SimTime::from_micros(997 * 50));
    }

    proptest::proptest! {
        #[test]
        fn depth_is_minimal(index in 1u64..1_000_000, fanout in 2u32..64) {
            let l = dispatch_depth(index, fanout);
            let reach = |l: u32| (1..=l).map(|k| (fanout as u128).pow(k)).sum::<u128>();
            proptest::prop_assert!(reach(l) >= index as u128);
            proptest::prop_assert!(l == 1 || reach(l - 1) < index as u128);
        }

        #[test]
        fn rate_never_exceeds_fs_ceiling(n in 1u32..40, p in 1u32..40, f in 1u32..5) {
            let r = launch(LaunchMode::TwoTier, n, p, f);
            let (_, rate) = launch_metrics(&r).unwrap();
            proptest::prop_assert!(rate <= 20_000.0 / f as f64 + 1e-9);
        }
    }
}
