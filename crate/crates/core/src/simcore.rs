//! Deterministic discrete-event engine.
//!
//! Time is an integer count of microseconds. Events are ordered by
//! `(time, seq)`, where `seq` is assigned at scheduling time, so events
//! scheduled for the same instant are handled in FIFO order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point on the simulated time axis, in whole microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SimTime(u64);

pub const MICROS_PER_SEC: u64 = 1_000_000;

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    /// Rounds to the nearest microsecond. Negative or non-finite input is rejected.
    pub fn from_secs_f64(secs: f64) -> Option<Self> {
        if !secs.is_finite() || secs < 0.0 {
            return None;
        }
        let us = (secs * MICROS_PER_SEC as f64).round();
        if us > u64::MAX as f64 {
            return None;
        }
        Some(SimTime(us as u64))
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC as f64
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    pub fn times(self, k: u64) -> SimTime {
        SimTime(self.0 * k)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

/// Seconds with six fractional digits; exact at microsecond resolution.
impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / MICROS_PER_SEC, self.0 % MICROS_PER_SEC)
    }
}

/// Payloads carried by events. `kind` is the tag written to traces and
/// `Display` provides the payload summary column.
pub trait EventPayload: fmt::Display {
    fn kind(&self) -> &'static str;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: P,
}

impl<P> PartialEq for Event<P> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<P> Eq for Event<P> {}

impl<P> PartialOrd for Event<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed so the max-heap pops the earliest (time, seq).
impl<P> Ord for Event<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event scheduled in the past: t={at} while now={now}")]
    PastEvent { at: SimTime, now: SimTime },
    #[error("engine is already running")]
    AlreadyRunning,
}

/// Receives events in `(time, seq)` order and may schedule more.
pub trait Handler<P> {
    type Error: From<EngineError>;

    fn handle(&mut self, event: Event<P>, engine: &mut Engine<P>) -> Result<(), Self::Error>;
}

pub struct Engine<P> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Event<P>>,
    processed: u64,
    scheduled: u64,
    running: bool,
    trace: Option<Box<dyn Write + Send>>,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> fmt::Debug for Engine<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("now", &self.now)
            .field("pending", &self.queue.len())
            .field("processed", &self.processed)
            .finish()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 1,
            queue: BinaryHeap::new(),
            processed: 0,
            scheduled: 0,
            running: false,
            trace: None,
        }
    }

    /// Every processed event is written as `time_us\tseq\tkind\tsummary`.
    pub fn set_trace(&mut self, sink: Box<dyn Write + Send>) {
        self.trace = Some(sink);
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn scheduled(&self) -> u64 {
        self.scheduled
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, at: SimTime, payload: P) -> Result<EventId, EngineError> {
        if at < self.now {
            return Err(EngineError::PastEvent { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.scheduled += 1;
        self.queue.push(Event { time: at, seq, payload });
        Ok(EventId(seq))
    }

    pub fn schedule_after(&mut self, delay: SimTime, payload: P) -> Result<EventId, EngineError> {
        self.schedule(self.now + delay, payload)
    }
}

impl<P: EventPayload> Engine<P> {
    /// Processes events until the queue is empty or the next event lies
    /// beyond `horizon`. With a horizon the clock is left at the horizon.
    pub fn run<H: Handler<P>>(&mut self, handler: &mut H, horizon: Option<SimTime>) -> Result<SimTime, H::Error> {
        if self.running {
            return Err(EngineError::AlreadyRunning.into());
        }
        self.running = true;
        let result = self.run_loop(handler, horizon);
        self.running = false;
        if let Some(t) = self.trace.as_mut() {
            let _ = t.flush();
        }
        result
    }

    fn run_loop<H: Handler<P>>(&mut self, handler: &mut H, horizon: Option<SimTime>) -> Result<SimTime, H::Error> {
        while let Some(head) = self.queue.peek() {
            if let Some(h) = horizon {
                if head.time > h {
                    break;
                }
            }
            let event = self.queue.pop().expect("peeked");
            self.now = event.time;
            self.processed += 1;
            if let Some(sink) = self.trace.as_mut() {
                // trace output is best effort
                let _ = writeln!(
                    sink,
                    "{}\t{}\t{}\t{}",
                    event.time.as_micros(),
                    event.seq,
                    event.payload.kind(),
                    event.payload
                );
            }
            handler.handle(event, self)?;
        }
        if let Some(h) = horizon {
            if h > self.now {
                self.now = h;
            }
        }
        Ok(self.now)
    }
}
