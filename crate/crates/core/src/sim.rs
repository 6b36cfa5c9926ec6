//! One simulated scenario: the event handlers that connect job lifecycle
//! management, resource management, the periodic scheduling task and job
//! execution (dispatch, launch, task completion).

use std::collections::BTreeMap;
use std::fmt;

use log::{debug, trace};
use thiserror::Error;

use crate::cli::metrics::{BacklogTrace, UtilizationTrace};
use crate::cluster::{AllocId, AppImage, CentralFs, Cluster, ClusterError, JobId, NodeId};
use crate::launchmodel::{LaunchError, LaunchMode, LaunchRecord, LaunchState, LaunchStep, NodeLaunch, TimingModel};
use crate::sched::{
    place_sync, place_tasks, Job, JobShape, JobState, Policy, RejectReason, Reservation, ReservationBook, SchedError,
    Scheduler, SchedulerConfig, WindowState,
};
use crate::simcore::{Engine, EngineError, Event, EventPayload, Handler, SimTime};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimEvent {
    JobSubmit(JobId),
    SchedulerCycle,
    ImmediateAttempt(JobId),
    Launch { launch: u32, step: LaunchStep },
    TaskComplete { job: JobId, task: u32 },
    ReservationStart(u32),
    ReservationEnd(u32),
}

impl EventPayload for SimEvent {
    fn kind(&self) -> &'static str {
        match self {
            SimEvent::JobSubmit(_) => "job-submit",
            SimEvent::SchedulerCycle => "scheduler-cycle",
            SimEvent::ImmediateAttempt(_) => "immediate-attempt",
            SimEvent::Launch { step, .. } => match step {
                LaunchStep::DispatchArrival(_) => "dispatch-arrival",
                LaunchStep::LauncherReady(_) => "launcher-ready",
                LaunchStep::ProcForked(_) => "proc-forked",
                LaunchStep::LoadDone(_) => "load-done",
                LaunchStep::FsDone(_) => "fs-request-done",
            },
            SimEvent::TaskComplete { .. } => "task-complete",
            SimEvent::ReservationStart(_) => "reservation-start",
            SimEvent::ReservationEnd(_) => "reservation-end",
        }
    }
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SimEvent::JobSubmit(j) | SimEvent::ImmediateAttempt(j) => write!(f, "job={j}"),
            SimEvent::SchedulerCycle => f.write_str("-"),
            SimEvent::Launch { launch, step } => {
                let (what, i) = match step {
                    LaunchStep::DispatchArrival(i) | LaunchStep::LauncherReady(i) => ("target", i),
                    LaunchStep::ProcForked(i) | LaunchStep::LoadDone(i) | LaunchStep::FsDone(i) => ("proc", i),
                };
                write!(f, "launch={launch} {what}={i}")
            }
            SimEvent::TaskComplete { job, task } => write!(f, "job={job} task={task}"),
            SimEvent::ReservationStart(r) | SimEvent::ReservationEnd(r) => write!(f, "reservation={r}"),
        }
    }
}

/// Everything needed to build a run.
#[derive(Clone, Debug)]
pub struct SimSetup {
    pub cluster: Cluster,
    pub apps: Vec<AppImage>,
    pub fs_mu: f64,
    pub policy: Policy,
    pub scheduler: SchedulerConfig,
    pub mode: LaunchMode,
    pub timing: TimingModel,
    /// Ids must be 1..=n in order.
    pub jobs: Vec<Job>,
    pub reservations: Vec<Reservation>,
}

#[derive(Clone, Debug, Default)]
struct JobRun {
    unplaced: Vec<u32>,
    task_alloc: Vec<Option<AllocId>>,
    gang_allocs: Vec<AllocId>,
    task_done: Vec<bool>,
    done: u32,
    launches: Vec<u32>,
    attempt_at: Option<SimTime>,
    run_start: Option<SimTime>,
    completed_at: Option<SimTime>,
    reservation: Option<usize>,
}

enum LaunchSlot {
    Active { state: LaunchState, tasks: Vec<u32> },
    Done(LaunchRecord),
}

/// Per-job outcome of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct JobOutcome {
    pub job: JobId,
    pub user: String,
    pub app: String,
    pub interactive: bool,
    pub state: JobState,
    pub reject_reason: Option<RejectReason>,
    pub submit: SimTime,
    /// Wait for the scheduler to start the immediate attempt.
    pub attempt_delay: Option<SimTime>,
    pub pending: SimTime,
    pub launch: Option<SimTime>,
    pub run: Option<SimTime>,
}

struct World {
    cluster: Cluster,
    apps: Vec<AppImage>,
    fs: CentralFs,
    sched: Scheduler,
    mode: LaunchMode,
    timing: TimingModel,
    jobs: Vec<Job>,
    runs: Vec<JobRun>,
    book: ReservationBook,
    launches: Vec<LaunchSlot>,
    buf: Vec<(SimTime, LaunchStep)>,
    util: UtilizationTrace,
    backlog: BacklogTrace,
    max_charged: BTreeMap<String, u64>,
}

pub struct Simulation {
    engine: Engine<SimEvent>,
    world: World,
}

impl Simulation {
    pub fn new(setup: SimSetup) -> Result<Self, SimError> {
        let mut engine = Engine::new();
        let mut book = ReservationBook::default();
        for res in setup.reservations {
            let idx = book.add(res, &setup.cluster, SimTime::ZERO)?;
            let r = &book.get(idx).spec;
            engine.schedule(r.start, SimEvent::ReservationStart(idx as u32))?;
            engine.schedule(r.end(), SimEvent::ReservationEnd(idx as u32))?;
        }
        let mut runs = Vec::with_capacity(setup.jobs.len());
        for (i, job) in setup.jobs.iter().enumerate() {
            if job.id != i as JobId + 1 {
                return Err(SimError::Invariant(format!("job ids must be consecutive from 1, found {}", job.id)));
            }
            let n = job.shape.task_count();
            let mut run = JobRun { task_done: vec![false; n as usize], ..JobRun::default() };
            if let JobShape::JobArray { tasks, .. } = job.shape {
                run.unplaced = (0..tasks).collect();
                run.task_alloc = vec![None; tasks as usize];
            }
            runs.push(run);
            engine.schedule(job.submit_time, SimEvent::JobSubmit(job.id))?;
        }
        let mut util = UtilizationTrace::new(setup.cluster.total_slots());
        util.record(SimTime::ZERO, 0);
        let world = World {
            fs: CentralFs::new(setup.fs_mu),
            sched: Scheduler::new(setup.scheduler, setup.policy),
            cluster: setup.cluster,
            apps: setup.apps,
            mode: setup.mode,
            timing: setup.timing,
            jobs: setup.jobs,
            runs,
            book,
            launches: Vec::new(),
            buf: Vec::new(),
            util,
            backlog: BacklogTrace::default(),
            max_charged: BTreeMap::new(),
        };
        Ok(Simulation { engine, world })
    }

    pub fn set_trace(&mut self, sink: Box<dyn std::io::Write + Send>) {
        self.engine.set_trace(sink);
    }

    pub fn run(&mut self, horizon: Option<SimTime>) -> Result<SimTime, SimError> {
        let end = self.engine.run(&mut self.world, horizon)?;
        if self.engine.pending() == 0 {
            self.check_final()?;
        }
        Ok(end)
    }

    /// Checks that hold once every event has been processed.
    pub fn check_final(&self) -> Result<(), SimError> {
        self.world.cluster.check_all()?;
        for j in &self.world.jobs {
            if !matches!(j.state(), JobState::Completed | JobState::Rejected) {
                return Err(SimError::Invariant(format!("job {} ended in state {}", j.id, j.state())));
            }
        }
        if self.world.cluster.allocated_slots() != 0 {
            return Err(SimError::Invariant("slots still allocated after drain".into()));
        }
        Ok(())
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn events_processed(&self) -> u64 {
        self.engine.processed()
    }

    pub fn jobs(&self) -> &[Job] {
        &self.world.jobs
    }

    pub fn cluster(&self) -> &Cluster {
        &self.world.cluster
    }

    pub fn fs(&self) -> &CentralFs {
        &self.world.fs
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.world.sched
    }

    pub fn utilization_trace(&self) -> &UtilizationTrace {
        &self.world.util
    }

    pub fn backlog_trace(&self) -> &BacklogTrace {
        &self.world.backlog
    }

    /// Highest slot count each user held at any event boundary.
    pub fn max_charged(&self) -> &BTreeMap<String, u64> {
        &self.world.max_charged
    }

    /// Completed launch records in dispatch order.
    pub fn launch_records(&self) -> impl Iterator<Item = &LaunchRecord> {
        self.world.launches.iter().filter_map(|l| match l {
            LaunchSlot::Done(r) => Some(r),
            LaunchSlot::Active { .. } => None,
        })
    }

    pub fn job_launch_records(&self, job: JobId) -> Vec<&LaunchRecord> {
        let Some(run) = self.world.runs.get(job as usize - 1) else {
            return Vec::new();
        };
        run.launches
            .iter()
            .filter_map(|&l| match &self.world.launches[l as usize] {
                LaunchSlot::Done(r) => Some(r),
                LaunchSlot::Active { .. } => None,
            })
            .collect()
    }

    pub fn outcomes(&self) -> Vec<JobOutcome> {
        self.world
            .jobs
            .iter()
            .zip(&self.world.runs)
            .map(|(job, run)| {
                let launch = self.job_launch_records(job.id).first().and_then(|r| r.launch_time().ok());
                JobOutcome {
                    job: job.id,
                    user: job.user.clone(),
                    app: job.app.clone(),
                    interactive: job.interactive,
                    state: job.state(),
                    reject_reason: job.reject_reason,
                    submit: job.submit_time,
                    attempt_delay: run.attempt_at.map(|t| t - job.submit_time),
                    pending: job.pending_time(),
                    launch,
                    run: match (run.run_start, run.completed_at) {
                        (Some(s), Some(e)) => Some(e - s),
                        _ => None,
                    },
                }
            })
            .collect()
    }
}

impl Handler<SimEvent> for World {
    type Error = SimError;

    fn handle(&mut self, ev: Event<SimEvent>, engine: &mut Engine<SimEvent>) -> Result<(), SimError> {
        let now = ev.time;
        match ev.payload {
            SimEvent::JobSubmit(id) => self.on_submit(id, now, engine),
            SimEvent::ImmediateAttempt(id) => {
                self.sched.backlog_pop();
                self.backlog.record(now, self.sched.backlog());
                self.attempt(id, now, engine)
            }
            SimEvent::SchedulerCycle => self.on_cycle(now, engine),
            SimEvent::Launch { launch, step } => self.on_launch_step(launch, step, now, engine),
            SimEvent::TaskComplete { job, task } => self.on_task_complete(job, task, now, engine),
            SimEvent::ReservationStart(r) => {
                self.book.get_mut(r as usize).state = WindowState::Active;
                self.serve_reservation(r as usize, now, engine)
            }
            SimEvent::ReservationEnd(r) => self.on_reservation_end(r as usize, now, engine),
        }
    }
}

impl World {
    fn job(&self, id: JobId) -> Result<&Job, SchedError> {
        self.jobs.get((id as usize).wrapping_sub(1)).ok_or(SchedError::UnknownJob(id))
    }

    fn job_mut(&mut self, id: JobId) -> Result<&mut Job, SchedError> {
        self.jobs.get_mut((id as usize).wrapping_sub(1)).ok_or(SchedError::UnknownJob(id))
    }

    fn run_mut(&mut self, id: JobId) -> &mut JobRun {
        &mut self.runs[id as usize - 1]
    }

    fn arm_cycle(&mut self, now: SimTime, engine: &mut Engine<SimEvent>) -> Result<(), SimError> {
        if self.sched.queue_len() > 0 {
            if let Some(t) = self.sched.arm_cycle(now) {
                engine.schedule(t, SimEvent::SchedulerCycle)?;
            }
        }
        Ok(())
    }

    fn on_submit(&mut self, id: JobId, now: SimTime, engine: &mut Engine<SimEvent>) -> Result<(), SimError> {
        let job = self.job(id)?;
        let (n_nodes, cap) = (self.cluster.node_count(), self.cluster.capacity());
        if !job.shape.fits_cluster(n_nodes, cap) || !self.apps.iter().any(|a| a.name == job.app) {
            debug!("job {id} infeasible on this cluster");
            return Ok(self.job_mut(id)?.reject(RejectReason::Infeasible, now)?);
        }
        if let Some(rid) = job.reservation.clone() {
            return self.submit_reserved(id, &rid, now, engine);
        }
        let policy = self.sched.policy;
        if let Some(limit) = policy.limit() {
            let floor = match job.shape {
                JobShape::JobArray { slots_per_task, .. } if !job.interactive => slots_per_task as u64,
                _ => job.shape.charged_slots(),
            };
            if floor > limit {
                return Ok(self.job_mut(id)?.reject(RejectReason::LimitExceeded, now)?);
            }
        }
        if policy.wants_immediate(job) {
            let start = self.sched.occupy(now, 1);
            if start == now {
                return self.attempt(id, now, engine);
            }
            self.sched.backlog_push();
            self.backlog.record(now, self.sched.backlog());
            engine.schedule(start, SimEvent::ImmediateAttempt(id))?;
            return Ok(());
        }
        let job = self.job_mut(id)?;
        job.transition(JobState::Pending, now)?;
        let job = self.job(id)?.clone();
        self.sched.enqueue(&job, false);
        self.arm_cycle(now, engine)
    }

    fn submit_reserved(
        &mut self,
        id: JobId,
        rid: &str,
        now: SimTime,
        engine: &mut Engine<SimEvent>,
    ) -> Result<(), SimError> {
        let job = self.job(id)?;
        let idx = match (self.sched.policy, self.book.find(rid)) {
            (Policy::BatchWithReservations, Some(idx)) => idx,
            _ => return Ok(self.job_mut(id)?.reject(RejectReason::Infeasible, now)?),
        };
        let booked = self.book.get(idx);
        let fits = match job.shape {
            JobShape::SyncParallel { nodes, .. } => nodes as usize <= booked.nodes.len(),
            JobShape::JobArray { .. } => true,
        };
        if booked.spec.user != job.user || !fits {
            return Ok(self.job_mut(id)?.reject(RejectReason::Infeasible, now)?);
        }
        if booked.state == WindowState::Ended {
            return Ok(self.job_mut(id)?.reject(RejectReason::ReservationExpired, now)?);
        }
        self.job_mut(id)?.transition(JobState::Pending, now)?;
        self.run_mut(id).reservation = Some(idx);
        let booked = self.book.get_mut(idx);
        booked.waiting.push(id);
        if booked.state == WindowState::Active {
            self.serve_reservation(idx, now, engine)?;
        }
        Ok(())
    }

    /// Immediate scheduling attempt; all-or-nothing for both shapes.
    fn attempt(&mut self, id: JobId, now: SimTime, engine: &mut Engine<SimEvent>) -> Result<(), SimError> {
        self.run_mut(id).attempt_at = Some(now);
        let job = self.job(id)?;
        let policy = self.sched.policy;
        if let Some(limit) = policy.limit() {
            if self.sched.charged(&job.user) + job.shape.charged_slots() > limit {
                return Ok(self.job_mut(id)?.reject(RejectReason::LimitExceeded, now)?);
            }
        }
        let placement = self.place(id, usize::MAX, |w, n| !w.book.is_pinned(n))?;
        let complete = match (&placement, job.shape) {
            (Some(p), JobShape::JobArray { tasks, .. }) => p.len() == tasks as usize,
            (Some(_), JobShape::SyncParallel { .. }) => true,
            (None, _) => false,
        };
        match placement {
            Some(p) if complete => {
                self.job_mut(id)?.transition(JobState::Pending, now)?;
                self.allocate_and_dispatch(id, p, now, engine)
            }
            _ if matches!(policy, Policy::InteractiveWithLimits { .. }) => {
                Ok(self.job_mut(id)?.reject(RejectReason::NoResources, now)?)
            }
            _ => {
                self.job_mut(id)?.transition(JobState::Pending, now)?;
                let job = self.job(id)?.clone();
                self.sched.enqueue(&job, true);
                self.arm_cycle(now, engine)
            }
        }
    }

    /// Candidate placement for a job: node per gang node, or node per task
    /// for up to `max_tasks` still-unplaced array tasks. `None` when nothing
    /// fits.
    fn place(
        &self,
        id: JobId,
        max_tasks: usize,
        eligible: impl Fn(&World, NodeId) -> bool,
    ) -> Result<Option<Vec<NodeId>>, SimError> {
        let job = self.job(id)?;
        let ok = |n| eligible(self, n);
        Ok(match job.shape {
            JobShape::SyncParallel { nodes, .. } => place_sync(&self.cluster, nodes, ok),
            JobShape::JobArray { slots_per_task, .. } => {
                let want = self.runs[id as usize - 1].unplaced.len().min(max_tasks);
                let p = place_tasks(&self.cluster, want, slots_per_task, ok);
                (!p.is_empty()).then_some(p)
            }
        })
    }

    fn allocate_and_dispatch(
        &mut self,
        id: JobId,
        placement: Vec<NodeId>,
        now: SimTime,
        engine: &mut Engine<SimEvent>,
    ) -> Result<(), SimError> {
        let job = self.job(id)?.clone();
        let cap = self.cluster.capacity();
        let mut groups: Vec<(NodeId, Vec<u32>)> = Vec::new();
        let charge;
        match job.shape {
            JobShape::SyncParallel { procs_per_node, .. } => {
                for (i, &node) in placement.iter().enumerate() {
                    let tasks: Vec<u32> = (i as u32 * procs_per_node..(i as u32 + 1) * procs_per_node).collect();
                    let a = self.cluster.allocate(id, node, cap, tasks.clone())?;
                    self.run_mut(id).gang_allocs.push(a);
                    groups.push((node, tasks));
                }
                charge = job.shape.charged_slots();
            }
            JobShape::JobArray { slots_per_task, .. } => {
                let taken: Vec<u32> = self.run_mut(id).unplaced.drain(..placement.len()).collect();
                for (&task, &node) in taken.iter().zip(&placement) {
                    let a = self.cluster.allocate(id, node, slots_per_task, vec![task])?;
                    self.run_mut(id).task_alloc[task as usize] = Some(a);
                    match groups.last_mut() {
                        Some((n, ts)) if *n == node => ts.push(task),
                        _ => groups.push((node, vec![task])),
                    }
                }
                charge = taken.len() as u64 * slots_per_task as u64;
            }
        }
        let held = self.sched.charge(&job.user, charge);
        let max = self.max_charged.entry(job.user.clone()).or_insert(0);
        *max = (*max).max(held);
        if let Some(limit) = self.sched.policy.limit() {
            if held > limit {
                return Err(SimError::Invariant(format!("user {} holds {held} slots over limit {limit}", job.user)));
            }
        }
        self.util.record(now, self.cluster.allocated_slots());
        if job.state() == JobState::Pending {
            self.job_mut(id)?.transition(JobState::Allocated, now)?;
        }
        self.dispatch(id, groups, now, engine)
    }

    /// Hands allocated nodes to the launch pipeline.
    fn dispatch(
        &mut self,
        id: JobId,
        groups: Vec<(NodeId, Vec<u32>)>,
        now: SimTime,
        engine: &mut Engine<SimEvent>,
    ) -> Result<(), SimError> {
        let job = self.job(id)?;
        match job.state() {
            JobState::Allocated | JobState::Launching | JobState::Running => {}
            state => return Err(SchedError::DispatchState { job: id, state }.into()),
        }
        let app =
            self.apps.iter().find(|a| a.name == job.app).ok_or_else(|| ClusterError::UnknownApp(job.app.clone()))?;
        let nodes: Vec<NodeLaunch> = groups
            .iter()
            .map(|(node, tasks)| NodeLaunch {
                node: *node,
                procs: tasks.len() as u32,
                requests: app.requests(self.cluster.is_cached(*node, &app.name)),
            })
            .collect();
        let state = LaunchState::new(id, self.mode, &nodes, &self.timing, app.load_time(), now);
        let launch = self.launches.len() as u32;
        for (t, step) in state.initial_steps(&self.timing) {
            engine.schedule(t, SimEvent::Launch { launch, step })?;
        }
        let tasks = groups.into_iter().flat_map(|(_, t)| t).collect();
        self.launches.push(LaunchSlot::Active { state, tasks });
        self.run_mut(id).launches.push(launch);
        if self.job(id)?.state() == JobState::Allocated {
            self.job_mut(id)?.transition(JobState::Launching, now)?;
        }
        trace!("dispatched job {id} as launch {launch}");
        Ok(())
    }

    fn on_launch_step(
        &mut self,
        launch: u32,
        step: LaunchStep,
        now: SimTime,
        engine: &mut Engine<SimEvent>,
    ) -> Result<(), SimError> {
        let slot = &mut self.launches[launch as usize];
        let LaunchSlot::Active { state, .. } = slot else {
            return Err(SimError::Invariant(format!("step for finished launch {launch}")));
        };
        state.advance(step, now, &mut self.fs, &mut self.buf);
        for (t, step) in self.buf.drain(..) {
            engine.schedule(t, SimEvent::Launch { launch, step })?;
        }
        if !state.is_complete() {
            return Ok(());
        }
        let record = state.record().clone();
        let job_id = record.job;
        let LaunchSlot::Active { tasks, .. } = std::mem::replace(slot, LaunchSlot::Done(record)) else {
            unreachable!()
        };
        if self.job(job_id)?.state() == JobState::Launching {
            self.job_mut(job_id)?.transition(JobState::Running, now)?;
            self.run_mut(job_id).run_start = Some(now);
        }
        let job = self.job(job_id)?;
        let completions: Vec<(SimTime, u32)> = tasks.iter().map(|&t| (now + job.duration(t), t)).collect();
        for (t, task) in completions {
            engine.schedule(t, SimEvent::TaskComplete { job: job_id, task })?;
        }
        Ok(())
    }

    fn on_task_complete(
        &mut self,
        id: JobId,
        task: u32,
        now: SimTime,
        engine: &mut Engine<SimEvent>,
    ) -> Result<(), SimError> {
        let job = self.job(id)?.clone();
        let total = job.shape.task_count();
        let run = self.run_mut(id);
        match run.task_done.get_mut(task as usize) {
            Some(done) if !*done => *done = true,
            _ => return Err(SchedError::UnknownTask { job: id, task }.into()),
        }
        run.done += 1;
        let finished = run.done == total;
        match job.shape {
            JobShape::JobArray { slots_per_task, .. } => {
                let a = self.run_mut(id).task_alloc[task as usize]
                    .take()
                    .ok_or(SchedError::UnknownTask { job: id, task })?;
                self.cluster.release(a)?;
                self.sched.uncharge(&job.user, slots_per_task as u64);
                self.util.record(now, self.cluster.allocated_slots());
            }
            JobShape::SyncParallel { .. } if finished => {
                for a in std::mem::take(&mut self.run_mut(id).gang_allocs) {
                    self.cluster.release(a)?;
                }
                self.sched.uncharge(&job.user, job.shape.charged_slots());
                self.util.record(now, self.cluster.allocated_slots());
            }
            JobShape::SyncParallel { .. } => {}
        }
        if finished {
            self.job_mut(id)?.transition(JobState::Completed, now)?;
            self.run_mut(id).completed_at = Some(now);
        }
        let active: Vec<usize> = self.book.active().collect();
        for r in active {
            self.serve_reservation(r, now, engine)?;
        }
        Ok(())
    }

    fn on_cycle(&mut self, now: SimTime, engine: &mut Engine<SimEvent>) -> Result<(), SimError> {
        if self.sched.busy_until() > now {
            // the scheduler is still busy with earlier work
            engine.schedule(self.sched.busy_until(), SimEvent::SchedulerCycle)?;
            return Ok(());
        }
        self.sched.cycle_started(now);
        let depth = self.sched.config.depth as usize;
        let queued: Vec<JobId> = self.sched.queued().collect();
        let mut examined = 0u64;
        for id in queued {
            if examined as usize == depth {
                break;
            }
            examined += 1;
            let job = self.job(id)?;
            let headroom = self.sched.headroom(&job.user);
            let eligible = |w: &World, n| !w.book.is_pinned(n);
            match job.shape {
                JobShape::SyncParallel { .. } => {
                    if headroom < job.shape.charged_slots() {
                        continue;
                    }
                    match self.place(id, usize::MAX, eligible)? {
                        Some(p) => {
                            self.sched.dequeue(id);
                            self.allocate_and_dispatch(id, p, now, engine)?;
                        }
                        None => break,
                    }
                }
                JobShape::JobArray { slots_per_task, .. } => {
                    let remaining = self.runs[id as usize - 1].unplaced.len();
                    let allowed = remaining.min((headroom / slots_per_task as u64).min(usize::MAX as u64) as usize);
                    if allowed == 0 {
                        continue;
                    }
                    let placed = self.place(id, allowed, eligible)?;
                    let n = placed.as_ref().map_or(0, |p| p.len());
                    if let Some(p) = placed {
                        self.allocate_and_dispatch(id, p, now, engine)?;
                    }
                    if self.runs[id as usize - 1].unplaced.is_empty() {
                        self.sched.dequeue(id);
                    }
                    if n < allowed {
                        break;
                    }
                }
            }
        }
        self.sched.occupy(now, examined);
        self.arm_cycle(now, engine)
    }

    fn serve_reservation(&mut self, idx: usize, now: SimTime, engine: &mut Engine<SimEvent>) -> Result<(), SimError> {
        if self.book.get(idx).state != WindowState::Active {
            return Ok(());
        }
        let waiting = self.book.get(idx).waiting.clone();
        for id in waiting {
            let placed = self.place(id, usize::MAX, |w, n| w.book.get(idx).nodes.contains(&n))?;
            let Some(p) = placed else { break };
            self.allocate_and_dispatch(id, p, now, engine)?;
            if !self.runs[id as usize - 1].unplaced.is_empty() {
                break;
            }
            self.book.get_mut(idx).waiting.retain(|&j| j != id);
        }
        Ok(())
    }

    fn on_reservation_end(&mut self, idx: usize, now: SimTime, engine: &mut Engine<SimEvent>) -> Result<(), SimError> {
        let booked = self.book.get_mut(idx);
        booked.state = WindowState::Ended;
        let waiting = std::mem::take(&mut booked.waiting);
        for id in waiting {
            if self.job(id)?.state() == JobState::Pending {
                self.job_mut(id)?.reject(RejectReason::ReservationExpired, now)?;
            } else {
                // partly placed array: the rest competes in the general queue
                let job = self.job(id)?.clone();
                self.sched.enqueue(&job, false);
            }
        }
        self.arm_cycle(now, engine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::NodeSpec;
    use crate::sched::PolicyKind;
    use proptest::prelude::*;

    fn setup(policy: PolicyKind, limit: u64, jobs: Vec<Job>) -> SimSetup {
        let mut cluster = Cluster::new(4, NodeSpec { cores: 4, threads_per_core: 1, oversub_max: 1 });
        let apps = vec![AppImage::octave()];
        cluster.install_cache("octave", &apps, 1..=4).unwrap();
        SimSetup {
            cluster,
            apps,
            fs_mu: 20_000.0,
            policy: Policy::new(policy, limit),
            scheduler: SchedulerConfig::default(),
            mode: LaunchMode::TwoTier,
            timing: TimingModel::default(),
            jobs,
            reservations: Vec::new(),
        }
    }

    fn secs(s: f64) -> SimTime {
        SimTime::from_secs_f64(s).unwrap()
    }

    #[test]
    fn dispatch_requires_an_allocated_job() {
        let job = Job::new(
            1,
            "u",
            "octave",
            JobShape::JobArray { tasks: 1, slots_per_task: 1 },
            SimTime::ZERO,
            false,
            vec![],
        );
        let mut sim = Simulation::new(setup(PolicyKind::AllBatch, 16, vec![job])).unwrap();
        let err = sim.world.dispatch(1, vec![(1, vec![0])], SimTime::ZERO, &mut sim.engine).unwrap_err();
        assert!(matches!(err, SimError::Sched(SchedError::DispatchState { job: 1, state: JobState::Submitted })));
    }

    #[test]
    fn unknown_task_is_a_hard_error() {
        let job = Job::new(
            1,
            "u",
            "octave",
            JobShape::JobArray { tasks: 2, slots_per_task: 1 },
            SimTime::ZERO,
            false,
            vec![],
        );
        let mut sim = Simulation::new(setup(PolicyKind::AllBatch, 16, vec![job])).unwrap();
        let err = sim.world.on_task_complete(1, 7, SimTime::ZERO, &mut sim.engine).unwrap_err();
        assert!(matches!(err, SimError::Sched(SchedError::UnknownTask { job: 1, task: 7 })));
    }

    #[test]
    fn trace_lines_name_event_kinds() {
        let job = Job::new(
            1,
            "u",
            "octave",
            JobShape::SyncParallel { nodes: 1, procs_per_node: 1 },
            SimTime::ZERO,
            true,
            vec![],
        );
        let mut sim = Simulation::new(setup(PolicyKind::InteractiveWithLimits, 16, vec![job])).unwrap();
        let buf = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        struct Sink(std::sync::Arc<std::sync::Mutex<Vec<u8>>>);
        impl std::io::Write for Sink {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().write(b)
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        sim.set_trace(Box::new(Sink(buf.clone())));
        sim.run(None).unwrap();
        let text = String::from_utf8(buf.lock().unwrap().clone()).unwrap();
        let kinds: Vec<&str> = text.lines().map(|l| l.split('\t').nth(2).unwrap()).collect();
        assert_eq!(
            kinds,
            [
                "job-submit",
                "dispatch-arrival",
                "launcher-ready",
                "proc-forked",
                "load-done",
                "fs-request-done",
                "task-complete"
            ]
        );
        assert!(text.starts_with("0\t1\tjob-submit\tjob=1\n"));
    }

    fn arb_jobs() -> impl Strategy<Value = Vec<Job>> {
        let one = (0u32..3000, 0u8..3, any::<bool>(), 1u32..5, 1u32..5, 0u32..3000);
        prop::collection::vec(one, 1..25).prop_map(|specs| {
            let mut specs = specs;
            specs.sort_by_key(|s| s.0);
            specs
                .into_iter()
                .enumerate()
                .map(|(i, (ms, user, interactive, a, b, dur_ms))| {
                    let shape = if (a + b) % 2 == 0 {
                        JobShape::SyncParallel { nodes: a, procs_per_node: b }
                    } else {
                        JobShape::JobArray { tasks: a * 2, slots_per_task: b }
                    };
                    Job::new(
                        i as u64 + 1,
                        format!("u{user}"),
                        "octave",
                        shape,
                        SimTime::from_micros(ms as u64 * 1000),
                        interactive,
                        vec![SimTime::from_micros(dur_ms as u64 * 1000)],
                    )
                })
                .collect()
        })
    }

    fn arb_policy() -> impl Strategy<Value = PolicyKind> {
        prop_oneof![
            Just(PolicyKind::AllBatch),
            Just(PolicyKind::AllImmediate),
            Just(PolicyKind::InteractiveWithLimits),
            Just(PolicyKind::BatchWithReservations)
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        // slot conservation, state conservation and the per-user limit
        #[test]
        fn random_workloads_keep_invariants(jobs in arb_jobs(), policy in arb_policy(), limit in 4u64..17) {
            let n = jobs.len();
            let mut sim = Simulation::new(setup(policy, limit, jobs)).unwrap();
            let end = sim.run(None).unwrap();
            prop_assert_eq!(sim.cluster().allocated_slots(), 0);
            let mut terminal = 0;
            for j in sim.jobs() {
                let states: Vec<JobState> = j.history().iter().map(|h| h.0).collect();
                let mut seen = states.clone();
                seen.sort();
                seen.dedup();
                prop_assert_eq!(seen.len(), states.len(), "state revisited: {:?}", states);
                prop_assert!(j.history().windows(2).all(|w| w[0].1 <= w[1].1));
                if matches!(j.state(), JobState::Completed | JobState::Rejected) {
                    terminal += 1;
                }
                if policy == PolicyKind::InteractiveWithLimits && j.interactive {
                    prop_assert_eq!(j.pending_time(), SimTime::ZERO);
                }
            }
            prop_assert_eq!(terminal, n);
            if let Some(l) = Policy::new(policy, limit).limit() {
                prop_assert!(sim.max_charged().values().all(|&m| m <= l));
            }
            if end > SimTime::ZERO {
                let u = sim.utilization_trace().utilization(SimTime::ZERO, end).unwrap();
                prop_assert!((0.0..=1.0).contains(&u));
            }
            prop_assert!(sim.utilization_trace().steps().iter().all(|s| s.1 <= 16));
        }

        #[test]
        fn reruns_are_identical(jobs in arb_jobs(), policy in arb_policy()) {
            let run = |jobs: Vec<Job>| {
                let mut sim = Simulation::new(setup(policy, 8, jobs)).unwrap();
                let end = sim.run(None).unwrap();
                (end, sim.outcomes(), sim.events_processed())
            };
            prop_assert_eq!(run(jobs.clone()), run(jobs));
        }
    }

    #[test]
    fn horizon_stops_early_without_final_checks() {
        let job = Job::new(
            1,
            "u",
            "octave",
            JobShape::JobArray { tasks: 1, slots_per_task: 1 },
            SimTime::ZERO,
            false,
            vec![secs(100.0)],
        );
        let mut sim = Simulation::new(setup(PolicyKind::AllBatch, 16, vec![job])).unwrap();
        assert_eq!(sim.run(Some(secs(5.0))).unwrap(), secs(5.0));
        assert_eq!(sim.jobs()[0].state(), JobState::Running);
        assert!(sim.check_final().is_err());
    }
}
