//! Scheduler building blocks: jobs and their lifecycle, policies, queue and
//! occupancy bookkeeping, first-fit placement and reservations.
//!
//! Event handling that ties these to the cluster and the launch pipeline
//! lives in [`crate::sim`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Cluster, JobId, NodeId};
use crate::simcore::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JobShape {
    /// Gang job: all nodes at once, held until the last task finishes.
    SyncParallel { nodes: u32, procs_per_node: u32 },
    /// Independent tasks, each allocated and released on its own.
    JobArray { tasks: u32, slots_per_task: u32 },
}

impl JobShape {
    pub fn task_count(&self) -> u32 {
        match *self {
            JobShape::SyncParallel { nodes, procs_per_node } => nodes * procs_per_node,
            JobShape::JobArray { tasks, .. } => tasks,
        }
    }

    /// Slots counted against per-user limits.
    pub fn charged_slots(&self) -> u64 {
        match *self {
            JobShape::SyncParallel { nodes, procs_per_node } => nodes as u64 * procs_per_node as u64,
            JobShape::JobArray { tasks, slots_per_task } => tasks as u64 * slots_per_task as u64,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        match *self {
            JobShape::SyncParallel { nodes, procs_per_node } => nodes >= 1 && procs_per_node >= 1,
            JobShape::JobArray { tasks, slots_per_task } => tasks >= 1 && slots_per_task >= 1,
        }
    }

    pub fn fits_cluster(&self, n_nodes: u32, capacity: u32) -> bool {
        match *self {
            JobShape::SyncParallel { nodes, procs_per_node } => nodes <= n_nodes && procs_per_node <= capacity,
            JobShape::JobArray { slots_per_task, .. } => slots_per_task <= capacity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Submitted,
    Pending,
    Allocated,
    Launching,
    Running,
    Completed,
    Rejected,
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JobState::Submitted => "submitted",
            JobState::Pending => "pending",
            JobState::Allocated => "allocated",
            JobState::Launching => "launching",
            JobState::Running => "running",
            JobState::Completed => "completed",
            JobState::Rejected => "rejected",
        };
        f.write_str(s)
    }
}

impl JobState {
    fn may_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Submitted, Pending)
                | (Submitted, Rejected)
                | (Pending, Allocated)
                // reservation jobs whose window closed before they were placed
                | (Pending, Rejected)
                | (Allocated, Launching)
                | (Launching, Running)
                | (Running, Completed)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Infeasible,
    LimitExceeded,
    NoResources,
    ReservationExpired,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::Infeasible => "infeasible",
            RejectReason::LimitExceeded => "limit_exceeded",
            RejectReason::NoResources => "no_resources",
            RejectReason::ReservationExpired => "reservation_expired",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedError {
    #[error("job {job}: illegal transition {from} -> {to}")]
    IllegalTransition { job: JobId, from: JobState, to: JobState },
    #[error("job {job}: dispatch in state {state}")]
    DispatchState { job: JobId, state: JobState },
    #[error("job {job}: unknown or finished task {task}")]
    UnknownTask { job: JobId, task: u32 },
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("reservation `{id}` rejected: {reason}")]
    ReservationRejected { id: String, reason: String },
}

#[derive(Clone, Debug)]
pub struct Job {
    pub id: JobId,
    pub user: String,
    pub app: String,
    pub shape: JobShape,
    pub submit_time: SimTime,
    /// Lower runs earlier.
    pub priority: i64,
    pub reservation: Option<String>,
    pub interactive: bool,
    /// One entry per task, or a single entry shared by every task.
    pub durations: Vec<SimTime>,
    state: JobState,
    history: Vec<(JobState, SimTime)>,
    pub reject_reason: Option<RejectReason>,
}

impl Job {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: JobId,
        user: impl Into<String>,
        app: impl Into<String>,
        shape: JobShape,
        submit_time: SimTime,
        interactive: bool,
        durations: Vec<SimTime>,
    ) -> Self {
        Job {
            id,
            user: user.into(),
            app: app.into(),
            shape,
            submit_time,
            priority: id as i64,
            reservation: None,
            interactive,
            durations,
            state: JobState::Submitted,
            history: vec![(JobState::Submitted, submit_time)],
            reject_reason: None,
        }
    }

    pub fn state(&self) -> JobState {
        self.state
    }

    pub fn history(&self) -> &[(JobState, SimTime)] {
        &self.history
    }

    pub fn transition(&mut self, to: JobState, at: SimTime) -> Result<(), SchedError> {
        if !self.state.may_become(to) {
            return Err(SchedError::IllegalTransition { job: self.id, from: self.state, to });
        }
        self.state = to;
        self.history.push((to, at));
        Ok(())
    }

    pub fn reject(&mut self, reason: RejectReason, at: SimTime) -> Result<(), SchedError> {
        self.transition(JobState::Rejected, at)?;
        self.reject_reason = Some(reason);
        Ok(())
    }

    pub fn entered(&self, state: JobState) -> Option<SimTime> {
        self.history.iter().find(|(s, _)| *s == state).map(|(_, t)| *t)
    }

    pub fn duration(&self, task: u32) -> SimTime {
        match self.durations.len() {
            0 => SimTime::ZERO,
            1 => self.durations[0],
            _ => self.durations.get(task as usize).copied().unwrap_or(SimTime::ZERO),
        }
    }

    /// Time spent in Pending (zero if it was never entered or left at once).
    pub fn pending_time(&self) -> SimTime {
        let Some(i) = self.history.iter().position(|(s, _)| *s == JobState::Pending) else {
            return SimTime::ZERO;
        };
        let start = self.history[i].1;
        let end = self.history.get(i + 1).map(|(_, t)| *t).unwrap_or(start);
        end - start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    AllBatch,
    BatchWithReservations,
    #[default]
    InteractiveWithLimits,
    AllImmediate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    AllBatch,
    BatchWithReservations,
    InteractiveWithLimits { per_user_core_limit: u64 },
    AllImmediate,
}

impl Policy {
    pub fn new(kind: PolicyKind, per_user_core_limit: u64) -> Self {
        match kind {
            PolicyKind::AllBatch => Policy::AllBatch,
            PolicyKind::BatchWithReservations => Policy::BatchWithReservations,
            PolicyKind::InteractiveWithLimits => Policy::InteractiveWithLimits { per_user_core_limit },
            PolicyKind::AllImmediate => Policy::AllImmediate,
        }
    }

    pub fn limit(&self) -> Option<u64> {
        match *self {
            Policy::InteractiveWithLimits { per_user_core_limit } => Some(per_user_core_limit),
            _ => None,
        }
    }

    /// Whether a freshly submitted job bypasses the batch queue.
    pub fn wants_immediate(&self, job: &Job) -> bool {
        match self {
            Policy::AllImmediate => true,
            Policy::InteractiveWithLimits { .. } => job.interactive,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Seconds between scheduling cycles.
    pub period_s: f64,
    /// Maximum queued jobs examined per cycle.
    pub depth: u32,
    /// Scheduler busy time per examined job or immediate attempt.
    pub t_sched_op_s: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { period_s: 0.1, depth: 1000, t_sched_op_s: 0.001 }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.period_s.is_finite() && self.period_s > 0.0) || self.period() == SimTime::ZERO {
            return Err("period_s");
        }
        if self.depth < 1 {
            return Err("depth");
        }
        if !(self.t_sched_op_s.is_finite() && self.t_sched_op_s >= 0.0) {
            return Err("t_sched_op_s");
        }
        Ok(())
    }

    pub fn period(&self) -> SimTime {
        SimTime::from_secs_f64(self.period_s).unwrap_or(SimTime::ZERO)
    }

    pub fn op_cost(&self) -> SimTime {
        SimTime::from_secs_f64(self.t_sched_op_s).unwrap_or(SimTime::ZERO)
    }
}

/// Scheduler-side state that is independent of the cluster: the batch
/// queue, its own serial occupancy, and per-user charges.
#[derive(Clone, Debug)]
pub struct Scheduler {
    pub config: SchedulerConfig,
    pub policy: Policy,
    queue: Vec<QueueEntry>,
    busy_until: SimTime,
    backlog: u32,
    last_cycle: Option<SimTime>,
    cycle_armed: bool,
    charged: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct QueueEntry {
    // false sorts first: jobs that already failed an immediate attempt
    normal: bool,
    priority: i64,
    job: JobId,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, policy: Policy) -> Self {
        Scheduler {
            config,
            policy,
            queue: Vec::new(),
            busy_until: SimTime::ZERO,
            backlog: 0,
            last_cycle: None,
            cycle_armed: false,
            charged: BTreeMap::new(),
        }
    }

    pub fn enqueue(&mut self, job: &Job, at_head: bool) {
        let entry = QueueEntry { normal: !at_head, priority: job.priority, job: job.id };
        let pos = self.queue.partition_point(|e| *e < entry);
        self.queue.insert(pos, entry);
    }

    pub fn dequeue(&mut self, job: JobId) {
        self.queue.retain(|e| e.job != job);
    }

    pub fn queued(&self) -> impl Iterator<Item = JobId> + '_ {
        self.queue.iter().map(|e| e.job)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    /// Reserves `ops` scheduler operations starting no earlier than `t`;
    /// returns the start time.
    pub fn occupy(&mut self, t: SimTime, ops: u64) -> SimTime {
        let start = t.max(self.busy_until);
        self.busy_until = start + self.config.op_cost().times(ops);
        start
    }

    pub fn backlog(&self) -> u32 {
        self.backlog
    }

    pub fn backlog_push(&mut self) {
        self.backlog += 1;
    }

    pub fn backlog_pop(&mut self) {
        self.backlog = self.backlog.saturating_sub(1);
    }

    /// Next cycle boundary (a positive multiple of the period) at or after
    /// `t` and strictly after the previous cycle, or `None` if one is
    /// already armed.
    pub fn arm_cycle(&mut self, t: SimTime) -> Option<SimTime> {
        if self.cycle_armed {
            return None;
        }
        let p = self.config.period().as_micros();
        let mut k = t.as_micros().div_ceil(p).max(1);
        if let Some(last) = self.last_cycle {
            let after = last.as_micros() / p + 1;
            k = k.max(after);
        }
        self.cycle_armed = true;
        Some(SimTime::from_micros(k * p))
    }

    pub fn cycle_started(&mut self, t: SimTime) {
        self.cycle_armed = false;
        self.last_cycle = Some(t);
    }

    pub fn charged(&self, user: &str) -> u64 {
        self.charged.get(user).copied().unwrap_or(0)
    }

    pub fn charge(&mut self, user: &str, slots: u64) -> u64 {
        let c = self.charged.entry(user.to_string()).or_insert(0);
        *c += slots;
        *c
    }

    pub fn uncharge(&mut self, user: &str, slots: u64) {
        if let Some(c) = self.charged.get_mut(user) {
            *c = c.saturating_sub(slots);
        }
    }

    /// Remaining slots the user may hold under the policy.
    pub fn headroom(&self, user: &str) -> u64 {
        match self.policy.limit() {
            Some(limit) => limit.saturating_sub(self.charged(user)),
            None => u64::MAX,
        }
    }
}

/// First `n` idle eligible nodes in ascending id order, or nothing.
pub fn place_sync(cluster: &Cluster, n: u32, eligible: impl Fn(NodeId) -> bool) -> Option<Vec<NodeId>> {
    let nodes: Vec<NodeId> = cluster
        .nodes()
        .filter(|s| eligible(s.node_id) && s.free_slots == cluster.capacity())
        .map(|s| s.node_id)
        .take(n as usize)
        .collect();
    (nodes.len() == n as usize).then_some(nodes)
}

/// First-fit of up to `count` equal tasks; returns the node for each placed
/// task, in task order.
pub fn place_tasks(
    cluster: &Cluster,
    count: usize,
    slots_per_task: u32,
    eligible: impl Fn(NodeId) -> bool,
) -> Vec<NodeId> {
    let mut out = Vec::with_capacity(count);
    for s in cluster.nodes() {
        if out.len() == count {
            break;
        }
        if !eligible(s.node_id) {
            continue;
        }
        let fit = (s.free_slots / slots_per_task) as usize;
        let take = fit.min(count - out.len());
        out.extend(std::iter::repeat_n(s.node_id, take));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub id: String,
    pub user: String,
    pub node_count: u32,
    pub start: SimTime,
    pub duration: SimTime,
}

impl Reservation {
    pub fn end(&self) -> SimTime {
        self.start + self.duration
    }

    fn overlaps(&self, other: &Reservation) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowState {
    Upcoming,
    Active,
    Ended,
}

#[derive(Clone, Debug)]
pub struct BookedReservation {
    pub spec: Reservation,
    pub nodes: Vec<NodeId>,
    pub state: WindowState,
    pub waiting: Vec<JobId>,
}

/// Reservations with their pinned nodes. Pinned nodes are withheld from
/// general allocation from booking until the window closes.
#[derive(Clone, Debug, Default)]
pub struct ReservationBook {
    entries: Vec<BookedReservation>,
}

impl ReservationBook {
    pub fn add(&mut self, res: Reservation, cluster: &Cluster, now: SimTime) -> Result<usize, SchedError> {
        let reject = |reason: &str| SchedError::ReservationRejected { id: res.id.clone(), reason: reason.to_string() };
        if self.entries.iter().any(|b| b.spec.id == res.id) {
            return Err(reject("duplicate id"));
        }
        if res.duration == SimTime::ZERO {
            return Err(reject("duration must be positive"));
        }
        if res.start < now {
            return Err(reject("window starts in the past"));
        }
        if res.node_count == 0 || res.node_count > cluster.node_count() {
            return Err(reject("node count exceeds cluster size"));
        }
        let taken: Vec<NodeId> = self
            .entries
            .iter()
            .filter(|b| b.state != WindowState::Ended && b.spec.overlaps(&res))
            .flat_map(|b| b.nodes.iter().copied())
            .collect();
        let nodes: Vec<NodeId> =
            (1..=cluster.node_count()).filter(|n| !taken.contains(n)).take(res.node_count as usize).collect();
        if nodes.len() < res.node_count as usize {
            return Err(reject("overlapping reservations exceed cluster size"));
        }
        self.entries.push(BookedReservation { spec: res, nodes, state: WindowState::Upcoming, waiting: Vec::new() });
        Ok(self.entries.len() - 1)
    }

    pub fn get(&self, idx: usize) -> &BookedReservation {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut BookedReservation {
        &mut self.entries[idx]
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|b| b.spec.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_pinned(&self, node: NodeId) -> bool {
        self.entries.iter().any(|b| b.state != WindowState::Ended && b.nodes.contains(&node))
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter(|(_, b)| b.state == WindowState::Active).map(|(i, _)| i)
    }
}
