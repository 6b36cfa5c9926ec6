//! Metrics derived from a finished run.

use serde::Serialize;
use thiserror::Error;

use crate::sched::{JobState, RejectReason};
use crate::sim::JobOutcome;
use crate::simcore::SimTime;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty measurement window [{from}, {to})")]
    EmptyWindow { from: SimTime, to: SimTime },
}

/// Allocated slots as a step function of time.
#[derive(Clone, Debug)]
pub struct UtilizationTrace {
    total_slots: u64,
    steps: Vec<(SimTime, u64)>,
}

impl UtilizationTrace {
    pub fn new(total_slots: u64) -> Self {
        UtilizationTrace { total_slots, steps: Vec::new() }
    }

    pub fn record(&mut self, t: SimTime, allocated: u64) {
        match self.steps.last_mut() {
            Some(last) if last.0 == t => last.1 = allocated,
            Some(last) if last.1 == allocated => {}
            _ => self.steps.push((t, allocated)),
        }
    }

    pub fn steps(&self) -> &[(SimTime, u64)] {
        &self.steps
    }

    pub fn total_slots(&self) -> u64 {
        self.total_slots
    }

    /// Time-weighted allocated fraction over `[from, to)`.
    pub fn utilization(&self, from: SimTime, to: SimTime) -> Result<f64, MetricsError> {
        if to <= from || self.total_slots == 0 {
            return Err(MetricsError::EmptyWindow { from, to });
        }
        let mut area: u128 = 0;
        for (i, &(t, alloc)) in self.steps.iter().enumerate() {
            let end = self.steps.get(i + 1).map_or(to, |s| s.0).min(to);
            let start = t.max(from);
            if end > start {
                area += (end - start).as_micros() as u128 * alloc as u128;
            }
        }
        let denom = (to - from).as_micros() as u128 * self.total_slots as u128;
        Ok(area as f64 / denom as f64)
    }
}

/// Count of immediate attempts deferred because the scheduler was busy.
#[derive(Clone, Debug, Default)]
pub struct BacklogTrace {
    steps: Vec<(SimTime, u32)>,
}

impl BacklogTrace {
    pub fn record(&mut self, t: SimTime, backlog: u32) {
        self.steps.push((t, backlog));
    }

    pub fn steps(&self) -> &[(SimTime, u32)] {
        &self.steps
    }

    pub fn peak(&self) -> u32 {
        self.steps.iter().map(|s| s.1).max().unwrap_or(0)
    }
}

/// Nearest-rank percentile of an unsorted sample, `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WaitStats {
    pub jobs: usize,
    pub mean_s: Option<f64>,
    pub p50_s: Option<f64>,
    pub p95_s: Option<f64>,
    pub max_s: Option<f64>,
}

impl WaitStats {
    pub fn of(values: &[f64]) -> Self {
        WaitStats {
            jobs: values.len(),
            mean_s: mean(values),
            p50_s: percentile(values, 0.5),
            p95_s: percentile(values, 0.95),
            max_s: values.iter().copied().reduce(f64::max),
        }
    }
}

/// Per-run summary printed alongside the job table.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub jobs: usize,
    pub completed: usize,
    pub rejected_limit: usize,
    pub rejected_resources: usize,
    pub rejected_infeasible: usize,
    pub rejected_reservation: usize,
    pub unfinished: usize,
    pub interactive_pending: WaitStats,
    pub batch_pending: WaitStats,
    pub attempt_delay: WaitStats,
    pub peak_backlog: u32,
    pub utilization: Option<f64>,
    pub end_s: f64,
}

impl RunSummary {
    pub fn new(outcomes: &[JobOutcome], util: &UtilizationTrace, backlog: &BacklogTrace, end: SimTime) -> Self {
        let mut s = RunSummary { jobs: outcomes.len(), end_s: end.as_secs_f64(), ..RunSummary::default() };
        let (mut inter, mut batch, mut delay) = (Vec::new(), Vec::new(), Vec::new());
        for o in outcomes {
            match (o.state, o.reject_reason) {
                (JobState::Completed, _) => s.completed += 1,
                (JobState::Rejected, Some(RejectReason::LimitExceeded)) => s.rejected_limit += 1,
                (JobState::Rejected, Some(RejectReason::NoResources)) => s.rejected_resources += 1,
                (JobState::Rejected, Some(RejectReason::Infeasible)) => s.rejected_infeasible += 1,
                (JobState::Rejected, _) => s.rejected_reservation += 1,
                _ => s.unfinished += 1,
            }
            if o.state != JobState::Rejected && o.state != JobState::Pending {
                let p = o.pending.as_secs_f64();
                if o.interactive {
                    inter.push(p)
                } else {
                    batch.push(p)
                }
            }
            if let Some(d) = o.attempt_delay {
                delay.push(d.as_secs_f64());
            }
        }
        s.interactive_pending = WaitStats::of(&inter);
        s.batch_pending = WaitStats::of(&batch);
        s.attempt_delay = WaitStats::of(&delay);
        s.peak_backlog = backlog.peak();
        s.utilization = util.utilization(SimTime::ZERO, end).ok();
        s
    }
}
