//! Compute nodes, slot allocation, per-node application caches, and the
//! shared central filesystem.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::{SimTime, MICROS_PER_SEC};

pub type NodeId = u32;
pub type JobId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AllocId(pub u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("allocation of zero slots on node {node}")]
    ZeroSlots { node: NodeId },
    #[error("node {node} has {free} free slots, {requested} requested")]
    InsufficientSlots { node: NodeId, requested: u32, free: u32 },
    #[error("no such node {0}")]
    UnknownNode(NodeId),
    #[error("unknown allocation {0:?}")]
    UnknownAllocation(AllocId),
    #[error("unknown application `{0}`")]
    UnknownApp(String),
    #[error("slot accounting broken on node {node}: free={free} allocated={allocated} capacity={capacity}")]
    SlotConservation { node: NodeId, free: u32, allocated: u32, capacity: u32 },
}

/// Hardware shape of a node. Slots = cores x threads_per_core x oversub_max.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub cores: u32,
    pub threads_per_core: u32,
    pub oversub_max: u32,
}

impl Default for NodeSpec {
    fn default() -> Self {
        NodeSpec { cores: 64, threads_per_core: 4, oversub_max: 2 }
    }
}

pub fn node_capacity(spec: &NodeSpec) -> u32 {
    spec.cores * spec.threads_per_core * spec.oversub_max
}

/// Startup cost profile of an application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppImage {
    pub name: String,
    /// Central-FS requests per process start when installed locally.
    pub f_central: u32,
    /// Uncontended local load time per process, seconds.
    pub t_local_load_s: f64,
    /// Central-FS requests per process start when not installed locally.
    pub f_central_nocache: u32,
}

impl AppImage {
    pub fn octave() -> Self {
        AppImage { name: "octave".into(), f_central: 3, t_local_load_s: 0.1, f_central_nocache: 1000 }
    }

    pub fn tensorflow() -> Self {
        AppImage { name: "tensorflow".into(), f_central: 2, t_local_load_s: 0.1, f_central_nocache: 1000 }
    }

    pub fn requests(&self, cached: bool) -> u32 {
        if cached {
            self.f_central
        } else {
            self.f_central_nocache
        }
    }

    pub fn load_time(&self) -> SimTime {
        SimTime::from_secs_f64(self.t_local_load_s).unwrap_or(SimTime::ZERO)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Allocation {
    pub job: JobId,
    pub node: NodeId,
    pub slots: u32,
    pub tasks: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct NodeState {
    pub node_id: NodeId,
    pub free_slots: u32,
    pub allocations: BTreeMap<AllocId, u32>,
    pub cached_apps: BTreeSet<String>,
}

impl NodeState {
    fn allocated(&self) -> u32 {
        self.allocations.values().sum()
    }
}

/// Node pool. Node ids run 1..=n.
#[derive(Clone, Debug)]
pub struct Cluster {
    spec: NodeSpec,
    capacity: u32,
    nodes: Vec<NodeState>,
    allocations: BTreeMap<AllocId, Allocation>,
    next_alloc: u64,
    allocated_slots: u64,
}

impl Cluster {
    pub fn new(n_nodes: u32, spec: NodeSpec) -> Self {
        let capacity = node_capacity(&spec);
        let nodes = (1..=n_nodes)
            .map(|node_id| NodeState {
                node_id,
                free_slots: capacity,
                allocations: BTreeMap::new(),
                cached_apps: BTreeSet::new(),
            })
            .collect();
        Cluster { spec, capacity, nodes, allocations: BTreeMap::new(), next_alloc: 1, allocated_slots: 0 }
    }

    pub fn spec(&self) -> &NodeSpec {
        &self.spec
    }

    pub fn node_count(&self) -> u32 {
        self.nodes.len() as u32
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn total_slots(&self) -> u64 {
        self.capacity as u64 * self.nodes.len() as u64
    }

    pub fn allocated_slots(&self) -> u64 {
        self.allocated_slots
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeState, ClusterError> {
        id.checked_sub(1).and_then(|i| self.nodes.get(i as usize)).ok_or(ClusterError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut NodeState, ClusterError> {
        id.checked_sub(1).and_then(|i| self.nodes.get_mut(i as usize)).ok_or(ClusterError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeState> {
        self.nodes.iter()
    }

    pub fn free_slots(&self, id: NodeId) -> u32 {
        self.node(id).map(|n| n.free_slots).unwrap_or(0)
    }

    pub fn is_idle(&self, id: NodeId) -> bool {
        self.free_slots(id) == self.capacity
    }

    pub fn allocation(&self, id: AllocId) -> Option<&Allocation> {
        self.allocations.get(&id)
    }

    pub fn allocate(&mut self, job: JobId, node: NodeId, slots: u32, tasks: Vec<u32>) -> Result<AllocId, ClusterError> {
        if slots == 0 {
            return Err(ClusterError::ZeroSlots { node });
        }
        let id = AllocId(self.next_alloc);
        let state = self.node_mut(node)?;
        if slots > state.free_slots {
            return Err(ClusterError::InsufficientSlots { node, requested: slots, free: state.free_slots });
        }
        state.free_slots -= slots;
        state.allocations.insert(id, slots);
        self.next_alloc += 1;
        self.allocated_slots += slots as u64;
        self.allocations.insert(id, Allocation { job, node, slots, tasks });
        self.check_node(node)?;
        Ok(id)
    }

    pub fn release(&mut self, id: AllocId) -> Result<u32, ClusterError> {
        let alloc = self.allocations.remove(&id).ok_or(ClusterError::UnknownAllocation(id))?;
        let state = self.node_mut(alloc.node)?;
        state.allocations.remove(&id);
        state.free_slots += alloc.slots;
        self.allocated_slots -= alloc.slots as u64;
        self.check_node(alloc.node)?;
        Ok(alloc.slots)
    }

    /// Slot conservation on one node.
    pub fn check_node(&self, id: NodeId) -> Result<(), ClusterError> {
        let n = self.node(id)?;
        let allocated = n.allocated();
        if allocated + n.free_slots != self.capacity || n.free_slots > self.capacity {
            return Err(ClusterError::SlotConservation {
                node: id,
                free: n.free_slots,
                allocated,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    pub fn check_all(&self) -> Result<(), ClusterError> {
        self.nodes.iter().try_for_each(|n| self.check_node(n.node_id))
    }

    /// Marks `app` as locally installed on each listed node.
    pub fn install_cache<I>(&mut self, app: &str, known_apps: &[AppImage], nodes: I) -> Result<(), ClusterError>
    where
        I: IntoIterator<Item = NodeId>,
    {
        if !known_apps.iter().any(|a| a.name == app) {
            return Err(ClusterError::UnknownApp(app.to_string()));
        }
        for id in nodes {
            self.node_mut(id)?.cached_apps.insert(app.to_string());
        }
        Ok(())
    }

    pub fn is_cached(&self, node: NodeId, app: &str) -> bool {
        self.node(node).map(|n| n.cached_apps.contains(app)).unwrap_or(false)
    }
}

/// Single FIFO server shared by every launching process.
///
/// Service time is derived from the cumulative request count, so the total
/// busy time after `n` requests is `round(n / mu)` microseconds with no
/// per-batch rounding drift.
#[derive(Clone, Debug)]
pub struct CentralFs {
    mu: f64,
    server_free: SimTime,
    busy_start: SimTime,
    served: u64,
    busy_us: u64,
    last_completion: SimTime,
}

impl CentralFs {
    pub fn new(mu: f64) -> Self {
        assert!(mu > 0.0 && mu.is_finite(), "fs service rate must be positive");
        CentralFs {
            mu,
            server_free: SimTime::ZERO,
            busy_start: SimTime::ZERO,
            served: 0,
            busy_us: 0,
            last_completion: SimTime::ZERO,
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    fn cumulative_us(&self, requests: u64) -> u64 {
        (requests as f64 * MICROS_PER_SEC as f64 / self.mu).round() as u64
    }

    /// Appends `n` requests arriving at `t` and returns the completion time
    /// of the last of them.
    pub fn enqueue(&mut self, n: u32, t: SimTime) -> SimTime {
        if n == 0 {
            return t;
        }
        if t >= self.server_free {
            self.busy_start = t;
        }
        let start = t.max(self.server_free);
        let before = self.cumulative_us(self.served);
        self.served += n as u64;
        let service = self.cumulative_us(self.served) - before;
        self.busy_us += service;
        self.server_free = start + SimTime::from_micros(service);
        debug_assert!(self.server_free >= self.last_completion);
        self.last_completion = self.server_free;
        self.server_free
    }

    /// Start of the busy period the most recent request belongs to.
    pub fn busy_period_start(&self) -> SimTime {
        self.busy_start
    }

    pub fn server_free(&self) -> SimTime {
        self.server_free
    }

    pub fn total_requests(&self) -> u64 {
        self.served
    }

    pub fn busy_time(&self) -> SimTime {
        SimTime::from_micros(self.busy_us)
    }
}
