//! The three compared methods, as strategies over the master/worker protocol.
//!
//! - **Synchronous**: every iteration queries all workers at the current point
//!   and averages their full contributions.
//! - **Bregman-PIAG**: stale gradients `γ∇f_i(x^{k-D_i^k})`, anchored at the
//!   latest iterate through `∇h(x^{k-1})`. No convergence guarantee.
//! - **Delay-tolerant** (`dave`): stale gradients anchored at their own
//!   computation points, `u_i = γ∇f_i(x^{k-D_i^k}) - ∇h(x^{k-D_i^k})`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::CompositeProblem;
use crate::protocol::{Master, WorkerState};
use crate::step::StepConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    Sync,
    Piag,
    Dave,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 3] = [AlgorithmKind::Sync, AlgorithmKind::Piag, AlgorithmKind::Dave];

    pub fn label(self) -> &'static str {
        match self {
            AlgorithmKind::Sync => "sync",
            AlgorithmKind::Piag => "piag",
            AlgorithmKind::Dave => "dave",
        }
    }

    pub fn has_convergence_guarantee(self) -> bool {
        !matches!(self, AlgorithmKind::Piag)
    }

    pub fn is_asynchronous(self) -> bool {
        !matches!(self, AlgorithmKind::Sync)
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(AlgorithmKind::Sync),
            "piag" => Ok(AlgorithmKind::Piag),
            "dave" => Ok(AlgorithmKind::Dave),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?} (expected sync, piag or dave)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlgorithmVariant {
    pub kind: AlgorithmKind,
    pub step: StepConfig,
}

impl AlgorithmVariant {
    pub fn new(kind: AlgorithmKind, step: StepConfig) -> Self {
        AlgorithmVariant { kind, step }
    }

    /// Guaranteed to converge: a variant with a guarantee run at `γ < 1/L`.
    pub fn is_convergence_grade(&self, smoothness: f64) -> bool {
        self.kind.has_convergence_guarantee() && self.step.is_convergence_grade(smoothness)
    }
}

/// One synchronous iteration in-process: query every worker at the master's
/// current point, wait for all, and step.
pub fn sync_round(master: &mut Master, workers: &mut [WorkerState], problem: &CompositeProblem) -> Result<Vec<f64>> {
    let x = master.x().to_vec();
    let kind = master.variant().kind;
    let gamma = master.variant().step.gamma;
    let geometry = master.variant().step.geometry.clone();
    let attach = master.wants_snapshots();
    let messages = workers
        .iter_mut()
        .map(|w| w.message(kind, &x, problem, geometry.as_ref(), gamma, attach))
        .collect::<Result<Vec<_>>>()?;
    master.receive_round(messages).map(<[f64]>::to_vec)
}

fn async_exchange(
    master: &mut Master,
    worker: &mut WorkerState,
    problem: &CompositeProblem,
    expected: AlgorithmKind,
) -> Result<Vec<f64>> {
    if master.variant().kind != expected {
        return Err(Error::Protocol(format!(
            "{} update on a {} master",
            expected,
            master.variant().kind
        )));
    }
    let x = worker
        .x_local
        .clone()
        .ok_or_else(|| Error::Protocol(format!("worker {} has no query point", worker.id)))?;
    let gamma = master.variant().step.gamma;
    let geometry = master.variant().step.geometry.clone();
    let msg = worker.message(expected, &x, problem, geometry.as_ref(), gamma, master.wants_snapshots())?;
    let next = master.receive(msg)?.to_vec();
    worker.x_local = Some(next.clone());
    Ok(next)
}

/// Worker computes at the point it holds; the master folds in the change of
/// `γ∇f_i` and steps with the anchor `∇h(x^{k-1})`. The worker is handed the new point.
pub fn piag_update(master: &mut Master, worker: &mut WorkerState, problem: &CompositeProblem) -> Result<Vec<f64>> {
    async_exchange(master, worker, problem, AlgorithmKind::Piag)
}

/// Delay-tolerant exchange in-process (the protocol's `master_receive` after a worker compute).
pub fn delay_tolerant_update(master: &mut Master, worker: &mut WorkerState, problem: &CompositeProblem) -> Result<Vec<f64>> {
    async_exchange(master, worker, problem, AlgorithmKind::Dave)
}
