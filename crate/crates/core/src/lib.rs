//! Discrete-event model of interactive job launch on a shared HPC cluster:
//! a scheduler with pluggable policies, a hierarchical launch pipeline and a
//! central filesystem that serializes program loads.

pub mod cli;
pub mod cluster;
pub mod launchmodel;
pub mod sched;
pub mod sim;
pub mod simcore;
pub mod workload;
