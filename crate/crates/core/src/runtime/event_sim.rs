//! Discrete-event backend. Single-threaded; every duration is drawn from one
//! seeded generator in a fixed order, so a seed determines the whole run.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{Control, DelayModel, DelayTracker, Observer, RunConfig, RunReport, Snapshot, StopReason};
use crate::algorithms::{AlgorithmKind, AlgorithmVariant};
use crate::error::{Error, Result};
use crate::problem::CompositeProblem;
use crate::protocol::{warm_up, Master, MasterOptions, WorkerState};

/// A worker's answer arriving at the master.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub worker: usize,
}

impl Eq for Event {}

impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pending events, popped by time and then by insertion order.
#[derive(Debug, Clone, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, worker: usize) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, worker });
        seq
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn peek(&self) -> Option<&Event> {
        self.heap.peek()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// What one simulation step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimStep {
    Exchange { worker: usize, time: f64 },
    Round { time: f64 },
}

impl SimStep {
    pub fn time(&self) -> f64 {
        match *self {
            SimStep::Exchange { time, .. } | SimStep::Round { time } => time,
        }
    }

    pub fn worker(&self) -> Option<usize> {
        match *self {
            SimStep::Exchange { worker, .. } => Some(worker),
            SimStep::Round { .. } => None,
        }
    }
}

pub struct EventSim<'a> {
    problem: &'a CompositeProblem,
    delays: &'a DelayModel,
    master: Master,
    workers: Vec<WorkerState>,
    queue: EventQueue,
    rng: ChaCha20Rng,
    now: f64,
    rounds: bool,
    round_end: Option<f64>,
}

impl<'a> EventSim<'a> {
    /// Sets up the master and workers. Asynchronous variants perform their
    /// warm-up round here, charged as one barrier round of virtual time.
    pub fn new(
        variant: &AlgorithmVariant,
        problem: &'a CompositeProblem,
        x0: &[f64],
        delays: &'a DelayModel,
        seed: u64,
        barrier: bool,
        options: MasterOptions,
    ) -> Result<Self> {
        delays.validate(problem.workers())?;
        let m = problem.workers();
        let master = Master::new(variant.clone(), m, x0.to_vec(), options)?;
        let mut sim = EventSim {
            problem,
            delays,
            master,
            workers: (0..m).map(|i| WorkerState::new(i, problem.dim())).collect(),
            queue: EventQueue::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            now: 0.0,
            rounds: variant.kind == AlgorithmKind::Sync || barrier,
            round_end: None,
        };
        if variant.kind.is_asynchronous() {
            sim.now = sim.sample_round();
            warm_up(&mut sim.master, &mut sim.workers, problem, x0)?;
            if !sim.rounds {
                for i in 0..m {
                    let t = sim.now + sim.delays.turnaround(i, &mut sim.rng);
                    sim.queue.push(t, i);
                }
            }
        }
        Ok(sim)
    }

    fn sample_round(&mut self) -> f64 {
        (0..self.workers.len())
            .map(|i| self.delays.turnaround(i, &mut self.rng))
            .fold(0.0, f64::max)
    }

    pub fn master(&self) -> &Master {
        &self.master
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn queue(&self) -> &EventQueue {
        &self.queue
    }

    /// Virtual time of the next step, or `None` when nothing is pending.
    pub fn next_time(&mut self) -> Option<f64> {
        if self.rounds {
            if self.round_end.is_none() {
                self.round_end = Some(self.now + self.sample_round());
            }
            self.round_end
        } else {
            self.queue.peek().map(|e| e.time)
        }
    }

    /// Process the earliest event: the worker computes at the point it holds,
    /// the master folds the message in, and the worker is rescheduled.
    /// Returns `None` on an empty queue.
    pub fn simulate_step(&mut self) -> Result<Option<SimStep>> {
        if self.rounds {
            return self.round().map(Some);
        }
        let Some(event) = self.queue.pop() else {
            return Ok(None);
        };
        let k = self.master.iteration() + 1;
        let i = event.worker;
        let variant = self.master.variant();
        let (kind, gamma, geometry) = (variant.kind, variant.step.gamma, variant.step.geometry.clone());
        let worker = &mut self.workers[i];
        let x = worker
            .x_local
            .clone()
            .ok_or_else(|| Error::Protocol(format!("worker {i} has no query point")).at(k))?;
        let msg = worker
            .message(
                kind,
                &x,
                self.problem,
                geometry.as_ref(),
                gamma,
                self.master.wants_snapshots(),
            )
            .map_err(|e| e.at(k))?;
        let next = self.master.receive(msg)?.to_vec();
        self.workers[i].x_local = Some(next);
        self.now = event.time;
        let t = self.now + self.delays.turnaround(i, &mut self.rng);
        self.queue.push(t, i);
        Ok(Some(SimStep::Exchange {
            worker: i,
            time: event.time,
        }))
    }

    fn round(&mut self) -> Result<SimStep> {
        let time = self.next_time().expect("rounds always have a next time");
        let k = self.master.iteration() + 1;
        let x = self.master.x().to_vec();
        let variant = self.master.variant();
        let (kind, gamma, geometry) = (variant.kind, variant.step.gamma, variant.step.geometry.clone());
        let attach = self.master.wants_snapshots();
        let messages = self
            .workers
            .iter_mut()
            .map(|w| w.message(kind, &x, self.problem, geometry.as_ref(), gamma, attach))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at(k))?;
        let next = self.master.receive_round(messages)?.to_vec();
        for w in &mut self.workers {
            w.x_local = Some(next.clone());
        }
        self.now = time;
        self.round_end = None;
        Ok(SimStep::Round { time })
    }
}

pub(crate) fn run(
    variant: &AlgorithmVariant,
    problem: &CompositeProblem,
    x0: &[f64],
    delays: &DelayModel,
    config: &RunConfig,
    observer: &mut (dyn Observer + Send),
) -> Result<RunReport> {
    let mut sim = EventSim::new(variant, problem, x0, delays, config.seed, config.barrier, config.master)?;
    let mut tracker = DelayTracker::new(problem.workers());
    let first = Snapshot {
        k: 0,
        seconds: 0.0,
        worker: None,
        epoch: sim.master.epoch(),
        x: sim.master.x(),
    };
    let mut stop = match observer.observe(&first)? {
        Control::Stop => Some(StopReason::Observer),
        Control::Continue => None,
    };
    while stop.is_none() {
        if config.max_iterations.is_some_and(|max| sim.master.iteration() >= max) {
            stop = Some(StopReason::MaxIterations);
            break;
        }
        let Some(t) = sim.next_time() else {
            stop = Some(StopReason::Idle);
            break;
        };
        if config.wall_budget_seconds.is_some_and(|b| t > b) {
            stop = Some(StopReason::WallBudget);
            break;
        }
        let Some(step) = sim.simulate_step()? else {
            stop = Some(StopReason::Idle);
            break;
        };
        tracker.update(&sim.master)?;
        let snap = Snapshot {
            k: sim.master.iteration(),
            seconds: step.time(),
            worker: step.worker(),
            epoch: sim.master.epoch(),
            x: sim.master.x(),
        };
        if observer.observe(&snap)? == Control::Stop {
            stop = Some(StopReason::Observer);
        }
    }
    let ledger = sim.master.ledger();
    Ok(RunReport {
        backend: config.backend,
        iterations: sim.master.iteration(),
        messages: sim.master.messages(),
        messages_sent: sim.master.messages(),
        epochs: sim.master.epoch(),
        seconds: sim.now,
        stop: stop.expect("loop exits with a reason"),
        exchange_counts: (0..problem.workers()).map(|i| ledger.exchange_count(i)).collect(),
        max_delay: tracker.into_inner(),
        max_audit_residual: sim.master.max_audit_residual(),
        x: sim.master.x().to_vec(),
    })
}
