//! Execution backends driving the master/worker protocol.
//!
//! [`event_sim`] replays the exchange pattern in virtual time on one thread and
//! is bit-for-bit reproducible. [`concurrent`] runs one thread per worker with
//! injected sleeps; its interleaving depends on the scheduler.
//!
//! Both backends report each new iterate to an [`Observer`], which may stop
//! the run. Warm-up happens inside [`run`].

pub mod concurrent;
pub mod event_sim;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::algorithms::AlgorithmVariant;
use crate::error::{Error, Result};
use crate::problem::CompositeProblem;
use crate::protocol::MasterOptions;

pub use event_sim::{Event, EventQueue, EventSim, SimStep};

/// Distribution of a duration, in virtual seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase", deny_unknown_fields)]
pub enum TimeLaw {
    Constant { value: f64 },
    Exponential { mean: f64 },
}

impl TimeLaw {
    pub fn constant(value: f64) -> Self {
        TimeLaw::Constant { value }
    }

    fn validate(&self, what: &str, allow_zero: bool) -> Result<()> {
        let v = match *self {
            TimeLaw::Constant { value } => value,
            TimeLaw::Exponential { mean } => mean,
        };
        let ok = v.is_finite() && if allow_zero { v >= 0.0 } else { v > 0.0 };
        if !ok {
            return Err(Error::Config(format!("{what} = {v} is out of range")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeLaw::Constant { value } => value,
            TimeLaw::Exponential { mean } if mean > 0.0 => Exp::new(1.0 / mean).expect("positive rate").sample(rng),
            TimeLaw::Exponential { .. } => 0.0,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, TimeLaw::Constant { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayModel {
    /// Slowdown multiplier per worker.
    pub factors: Vec<f64>,
    #[serde(default = "default_base_time")]
    pub base_time: TimeLaw,
    /// One-way message latency.
    #[serde(default = "default_comm_time")]
    pub comm_time: TimeLaw,
}

fn default_base_time() -> TimeLaw {
    TimeLaw::constant(1.0)
}

fn default_comm_time() -> TimeLaw {
    TimeLaw::constant(0.0)
}

impl DelayModel {
    pub fn new(factors: Vec<f64>) -> Self {
        DelayModel {
            factors,
            base_time: default_base_time(),
            comm_time: default_comm_time(),
        }
    }

    pub fn uniform(workers: usize) -> Self {
        Self::new(vec![1.0; workers])
    }

    pub fn validate(&self, workers: usize) -> Result<()> {
        if self.factors.len() != workers {
            return Err(Error::Config(format!(
                "{} slowdown factors for {workers} workers",
                self.factors.len()
            )));
        }
        if let Some(f) = self.factors.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
            return Err(Error::Config(format!("slowdown factor {f} must be positive")));
        }
        self.base_time.validate("base_time", false)?;
        self.comm_time.validate("comm_time", true)
    }

    /// Time between handing worker `i` a point and its answer reaching the master.
    pub fn turnaround<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> f64 {
        let compute = self.base_time.sample(rng) * self.factors[i];
        let there = self.comm_time.sample(rng);
        let back = self.comm_time.sample(rng);
        there + compute + back
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Concurrent,
    EventSim,
}

impl Backend {
    pub fn label(self) -> &'static str {
        match self {
            Backend::Concurrent => "concurrent",
            Backend::EventSim => "event_sim",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concurrent" => Ok(Backend::Concurrent),
            "event_sim" => Ok(Backend::EventSim),
            other => Err(Error::Config(format!(
                "unknown backend {other:?} (expected concurrent or event_sim)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: Backend,
    pub max_iterations: Option<u64>,
    /// Virtual seconds under `event_sim`, wall-clock seconds under `concurrent`.
    pub wall_budget_seconds: Option<f64>,
    /// F-gap threshold. Enforced by the observer, which knows `F*`.
    pub stop_tolerance: Option<f64>,
    pub seed: u64,
    /// Asynchronous variants wait for every worker each iteration.
    pub barrier: bool,
    /// Real seconds per virtual second of delay under `concurrent`.
    pub time_unit_seconds: f64,
    pub master: MasterOptions,
}

impl RunConfig {
    pub fn event_sim(max_iterations: u64) -> Self {
        RunConfig {
            backend: Backend::EventSim,
            max_iterations: Some(max_iterations),
            wall_budget_seconds: None,
            stop_tolerance: None,
            seed: 0,
            barrier: false,
            time_unit_seconds: 1e-4,
            master: MasterOptions::default(),
        }
    }

    pub fn concurrent(max_iterations: u64) -> Self {
        RunConfig {
            backend: Backend::Concurrent,
            ..Self::event_sim(max_iterations)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations.is_none() && self.wall_budget_seconds.is_none() && self.stop_tolerance.is_none() {
            return Err(Error::Config("no stopping condition set".into()));
        }
        if let Some(w) = self.wall_budget_seconds {
            if !(w > 0.0) {
                return Err(Error::Config(format!("wall budget {w} must be positive")));
            }
        }
        if let Some(t) = self.stop_tolerance {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("stop tolerance {t} must be nonnegative")));
            }
        }
        if !(self.time_unit_seconds >= 0.0 && self.time_unit_seconds.is_finite()) {
            return Err(Error::Config("time unit must be a nonnegative number of seconds".into()));
        }
        Ok(())
    }
}

/// A new iterate as seen by the master.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub k: u64,
    pub seconds: f64,
    /// The worker whose message produced this iterate; `None` for `x⁰` and full rounds.
    pub worker: Option<usize>,
    pub epoch: u64,
    pub x: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub trait Observer {
    fn observe(&mut self, snapshot: &Snapshot<'_>) -> Result<Control>;
}

/// Observes nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl Observer for NoObserver {
    fn observe(&mut self, _: &Snapshot<'_>) -> Result<Control> {
        Ok(Control::Continue)
    }
}

impl<F> Observer for F
where
    F: FnMut(&Snapshot<'_>) -> Result<Control>,
{
    fn observe(&mut self, snapshot: &Snapshot<'_>) -> Result<Control> {
        self(snapshot)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    WallBudget,
    Observer,
    /// Nothing left to simulate.
    Idle,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub backend: Backend,
    pub iterations: u64,
    /// Messages processed by the master, warm-up included.
    pub messages: u64,
    /// Messages workers managed to send; at most one per worker is left in flight at shutdown.
    pub messages_sent: u64,
    pub epochs: u64,
    pub seconds: f64,
    pub stop: StopReason,
    pub exchange_counts: Vec<u64>,
    /// Largest second-order delay `D_i^k` seen, per worker.
    pub max_delay: Vec<u64>,
    pub max_audit_residual: f64,
    pub x: Vec<f64>,
}

/// Run `variant` on `problem` until a stop condition. The observer sees `x⁰`
/// and every later iterate in order.
pub fn run(
    variant: &AlgorithmVariant,
    problem: &CompositeProblem,
    x0: &[f64],
    delays: &DelayModel,
    config: &RunConfig,
    observer: &mut (dyn Observer + Send),
) -> Result<RunReport> {
    config.validate()?;
    delays.validate(problem.workers())?;
    if x0.len() != problem.dim() {
        return Err(Error::Config(format!(
            "x0 has {} coordinates, the problem {}",
            x0.len(),
            problem.dim()
        )));
    }
    match config.backend {
        Backend::EventSim => event_sim::run(variant, problem, x0, delays, config, observer),
        Backend::Concurrent => concurrent::run(variant, problem, x0, delays, config, observer),
    }
}

/// Tracks the largest `D_i^k` over the run.
#[derive(Debug, Clone)]
pub(crate) struct DelayTracker {
    max: Vec<u64>,
}

impl DelayTracker {
    pub(crate) fn new(workers: usize) -> Self {
        DelayTracker { max: vec![0; workers] }
    }

    pub(crate) fn update(&mut self, master: &crate::protocol::Master) -> Result<()> {
        let k = master.iteration();
        for (i, slot) in self.max.iter_mut().enumerate() {
            let (_, dd) = master.ledger().delays(k, i)?;
            *slot = (*slot).max(dd);
        }
        Ok(())
    }

    pub(crate) fn into_inner(self) -> Vec<u64> {
        self.max
    }
}
