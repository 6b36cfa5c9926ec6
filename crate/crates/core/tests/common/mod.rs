#![allow(dead_code)]

use ilaunch::cluster::{AppImage, Cluster, NodeSpec};
use ilaunch::launchmodel::{LaunchMode, TimingModel};
use ilaunch::sched::{Job, JobShape, Policy, PolicyKind, Reservation, SchedulerConfig};
use ilaunch::sim::{SimSetup, Simulation};
use ilaunch::simcore::SimTime;

pub fn t(s: f64) -> SimTime {
    SimTime::from_secs_f64(s).unwrap()
}

/// Cluster of `nodes` nodes with `slots` slots each and octave cached.
pub fn toy(nodes: u32, slots: u32, policy: PolicyKind, limit: u64, jobs: Vec<Job>) -> SimSetup {
    let spec = NodeSpec { cores: slots, threads_per_core: 1, oversub_max: 1 };
    full(Cluster::new(nodes, spec), policy, limit, jobs)
}

/// Default 648-node cluster.
pub fn big(policy: PolicyKind, limit: u64, jobs: Vec<Job>) -> SimSetup {
    full(Cluster::new(648, NodeSpec::default()), policy, limit, jobs)
}

fn full(mut cluster: Cluster, policy: PolicyKind, limit: u64, jobs: Vec<Job>) -> SimSetup {
    let apps = vec![AppImage::octave(), AppImage::tensorflow()];
    let n = cluster.node_count();
    cluster.install_cache("octave", &apps, 1..=n).unwrap();
    cluster.install_cache("tensorflow", &apps, 1..=n).unwrap();
    SimSetup {
        cluster,
        apps,
        fs_mu: 20_000.0,
        policy: Policy::new(policy, limit),
        scheduler: SchedulerConfig::default(),
        mode: LaunchMode::TwoTier,
        timing: TimingModel::default(),
        jobs,
        reservations: Vec::<Reservation>::new(),
    }
}

pub fn gang(id: u64, user: &str, nodes: u32, ppn: u32, submit: f64, interactive: bool, dur: f64) -> Job {
    Job::new(
        id,
        user,
        "octave",
        JobShape::SyncParallel { nodes, procs_per_node: ppn },
        t(submit),
        interactive,
        vec![t(dur)],
    )
}

pub fn array(id: u64, user: &str, tasks: u32, spt: u32, submit: f64, interactive: bool, durs: &[f64]) -> Job {
    Job::new(
        id,
        user,
        "octave",
        JobShape::JobArray { tasks, slots_per_task: spt },
        t(submit),
        interactive,
        durs.iter().map(|&d| t(d)).collect(),
    )
}

pub fn run(setup: SimSetup) -> Simulation {
    let mut sim = Simulation::new(setup).unwrap();
    sim.run(None).unwrap();
    sim
}

/// Launch constants in whole microseconds, for the brute-force oracle.
#[derive(Clone, Copy, Debug)]
pub struct OracleTiming {
    pub fanout: u64,
    pub hop: u64,
    pub launcher: u64,
    pub fork: u64,
    pub load: u64,
    /// Microseconds per dispatch in per-process mode.
    pub dispatch_gap: u64,
    /// Microseconds per FS request.
    pub service: u64,
    pub requests: u64,
}

pub enum OracleMode {
    Tree,
    PerProcess,
}

/// Ready time of every process, keyed `(node, proc)` in node-major order.
///
/// Written from the model description alone: compute when each process
/// reaches the filesystem, order arrivals by (time, node, proc), then serve
/// them one after another.
pub fn fifo_oracle(nnode: u64, nproc: u64, mode: OracleMode, c: OracleTiming) -> Vec<u64> {
    let mut arrivals = Vec::new();
    for node in 1..=nnode {
        // tree level: smallest l with fanout + fanout^2 + ... + fanout^l >= node
        let (mut level, mut width, mut reach) = (1u64, c.fanout, c.fanout);
        while reach < node {
            level += 1;
            width *= c.fanout;
            reach += width;
        }
        for p in 1..=nproc {
            let forked = match mode {
                OracleMode::Tree => level * c.hop + c.launcher + p * c.fork,
                OracleMode::PerProcess => ((node - 1) * nproc + p) * c.dispatch_gap + c.fork,
            };
            arrivals.push((forked + c.load, node, p));
        }
    }
    let mut order = arrivals.clone();
    order.sort();
    let mut free = 0u64;
    let mut ready = std::collections::BTreeMap::new();
    for (at, node, p) in order {
        free = free.max(at) + c.requests * c.service;
        ready.insert((node, p), free);
    }
    arrivals.iter().map(|&(_, n, p)| ready[&(n, p)]).collect()
}
