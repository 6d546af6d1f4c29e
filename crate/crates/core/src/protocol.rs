//! Master/worker state machine.
//!
//! Iteration `k` is the `k`-th time the master receives a message. The master
//! keeps the aggregate `ū` up to date through worker adjustments `Δ/M` and
//! answers each message with a fresh proximal point. The [`ExchangeLedger`]
//! records who exchanged when, which is all that is needed to recover the
//! delays `d_i^k`, the second-order delays `D_i^k = d_i^k + d_i^{k-d_i^k-1} + 1`
//! and the epoch boundaries `k_m`.
//!
//! Initialization is a synchronous warm-up round at `x⁰`: every worker's first
//! contribution is a real computation, every worker counts as having exchanged
//! at `k = 0`, and `d_i^k = 0` for `k ≤ 0`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgorithmKind, AlgorithmVariant};
use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::problem::CompositeProblem;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// A full contribution, used by synchronous rounds.
    Contribution(Vec<f64>),
    /// `Δ = u⁺ - u` with `u = γ∇f_i(x) - ∇h(x)`.
    Adjustment(Vec<f64>),
    /// Change of `γ∇f_i` since the worker's last message (Bregman-PIAG).
    GradientAdjustment(Vec<f64>),
}

impl Payload {
    pub fn vector(&self) -> &[f64] {
        match self {
            Payload::Contribution(v) | Payload::Adjustment(v) | Payload::GradientAdjustment(v) => v,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Payload::Contribution(_) => "contribution",
            Payload::Adjustment(_) => "adjustment",
            Payload::GradientAdjustment(_) => "gradient adjustment",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub worker: usize,
    pub payload: Payload,
    /// The worker's full current vector, attached in audit mode.
    pub snapshot: Option<Vec<f64>>,
}

/// What a worker would contribute at `x`: `γ∇f_i(x) - ∇h(x)`, or `γ∇f_i(x)` for PIAG.
pub fn contribution(
    kind: AlgorithmKind,
    worker: usize,
    x: &[f64],
    problem: &CompositeProblem,
    geometry: &dyn Geometry,
    gamma: f64,
) -> Result<Vec<f64>> {
    let grad = problem.local_gradient(worker, x)?;
    match kind {
        AlgorithmKind::Piag => Ok(grad.into_iter().map(|g| gamma * g).collect()),
        AlgorithmKind::Sync | AlgorithmKind::Dave => {
            let gh = geometry.gradient(x)?;
            Ok(grad.iter().zip(&gh).map(|(g, h)| gamma * g - h).collect())
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: usize,
    /// Last vector sent to the master (in full or as an adjustment).
    pub u: Vec<f64>,
    pub x_local: Option<Vec<f64>>,
}

impl WorkerState {
    pub fn new(id: usize, dim: usize) -> Self {
        WorkerState {
            id,
            u: vec![0.0; dim],
            x_local: None,
        }
    }

    /// Compute at `x` and produce the payload the variant sends.
    pub fn compute(
        &mut self,
        kind: AlgorithmKind,
        x: &[f64],
        problem: &CompositeProblem,
        geometry: &dyn Geometry,
        gamma: f64,
    ) -> Result<Payload> {
        let next = contribution(kind, self.id, x, problem, geometry, gamma)?;
        let payload = match kind {
            AlgorithmKind::Sync => Payload::Contribution(next.clone()),
            AlgorithmKind::Dave => Payload::Adjustment(diff(&next, &self.u)),
            AlgorithmKind::Piag => Payload::GradientAdjustment(diff(&next, &self.u)),
        };
        self.u = next;
        self.x_local = Some(x.to_vec());
        Ok(payload)
    }

    pub fn message(
        &mut self,
        kind: AlgorithmKind,
        x: &[f64],
        problem: &CompositeProblem,
        geometry: &dyn Geometry,
        gamma: f64,
        attach_snapshot: bool,
    ) -> Result<Message> {
        let payload = self.compute(kind, x, problem, geometry, gamma)?;
        Ok(Message {
            worker: self.id,
            payload,
            snapshot: attach_snapshot.then(|| self.u.clone()),
        })
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// The delay-tolerant worker step: returns `Δ = u⁺ - u` and stores `u ← u⁺`.
pub fn worker_compute(
    worker: &mut WorkerState,
    x: &[f64],
    problem: &CompositeProblem,
    geometry: &dyn Geometry,
    gamma: f64,
) -> Result<Vec<f64>> {
    match worker.compute(AlgorithmKind::Dave, x, problem, geometry, gamma)? {
        Payload::Adjustment(delta) => Ok(delta),
        _ => unreachable!("delay-tolerant workers send adjustments"),
    }
}

/// Delays recomputed from a raw exchange log of `(k, worker)` pairs, with every
/// worker deemed to have exchanged at `k = 0`.
pub fn delays_from_log(log: &[(u64, usize)], k: u64, worker: usize) -> (u64, u64) {
    let d = |t: i64| -> u64 {
        if t <= 0 {
            return 0;
        }
        let t = t as u64;
        let last = log
            .iter()
            .filter(|&&(kk, w)| w == worker && kk <= t)
            .map(|&(kk, _)| kk)
            .max()
            .unwrap_or(0);
        t - last
    };
    let dk = d(k as i64);
    let dd = d(k as i64 - dk as i64 - 1);
    (dk, dk + dd + 1)
}

/// Exchange bookkeeping: delays and epochs.
#[derive(Debug, Clone)]
pub struct ExchangeLedger {
    last: Vec<i64>,
    prev: Vec<i64>,
    exchanges: Vec<u64>,
    k: u64,
    epoch: u64,
    epoch_starts: Vec<u64>,
    history: Option<Vec<(u64, usize)>>,
}

impl ExchangeLedger {
    pub fn new(workers: usize, keep_history: bool) -> Self {
        ExchangeLedger {
            last: vec![0; workers],
            // contributions held at k = 0 were computed at x⁰ ≡ x^{-1}
            prev: vec![-1; workers],
            exchanges: vec![0; workers],
            k: 0,
            epoch: 0,
            epoch_starts: vec![0],
            history: keep_history.then(Vec::new),
        }
    }

    pub fn workers(&self) -> usize {
        self.last.len()
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    /// Record that `workers` exchanged at iteration `k` (one worker for
    /// asynchronous exchanges, all of them for a synchronous round).
    pub fn record(&mut self, k: u64, workers: &[usize]) -> Result<()> {
        if k <= self.k {
            return Err(Error::Protocol(format!("iteration {k} recorded after iteration {}", self.k)));
        }
        for &w in workers {
            if w >= self.workers() {
                return Err(Error::Protocol(format!("unknown worker {w}")));
            }
        }
        self.k = k;
        for &w in workers {
            self.prev[w] = self.last[w];
            self.last[w] = k as i64;
            self.exchanges[w] += 1;
            if let Some(h) = self.history.as_mut() {
                h.push((k, w));
            }
        }
        Ok(())
    }

    pub fn last_exchange(&self, worker: usize) -> i64 {
        self.last[worker]
    }

    pub fn prev_exchange(&self, worker: usize) -> i64 {
        self.prev[worker]
    }

    pub fn exchange_count(&self, worker: usize) -> u64 {
        self.exchanges[worker]
    }

    /// `k - D_i^k` at the current iteration: the iteration whose point produced
    /// worker `i`'s contribution in the aggregate. `-1` stands for the warm-up
    /// computation at `x⁰`.
    pub fn source_iteration(&self, worker: usize) -> i64 {
        self.prev[worker]
    }

    /// `(d_i^k, D_i^k)`. The current iteration is answered from the last two
    /// exchanges; earlier iterations need the full history.
    pub fn delays(&self, k: u64, worker: usize) -> Result<(u64, u64)> {
        if worker >= self.workers() {
            return Err(Error::Protocol(format!("unknown worker {worker}")));
        }
        if k == self.k {
            let d = k - self.last[worker] as u64;
            let big = (k as i64 - self.prev[worker]) as u64;
            return Ok((d, big));
        }
        match &self.history {
            Some(log) if k < self.k => Ok(delays_from_log(log, k, worker)),
            Some(_) => Err(Error::Protocol(format!("iteration {k} has not happened yet"))),
            None => Err(Error::Protocol(format!(
                "delays at past iteration {k} need a ledger with history"
            ))),
        }
    }

    /// Advance the epoch counter if every worker has completed a full
    /// round-trip since the current epoch began, i.e. `k - D_i^k ≥ k_m` for all `i`.
    pub fn epoch_advance(&mut self) -> u64 {
        let start = self.epoch_start() as i64;
        if self.k as i64 > start && self.prev.iter().all(|&p| p >= start) {
            self.epoch += 1;
            self.epoch_starts.push(self.k);
        }
        self.epoch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn epoch_start(&self) -> u64 {
        *self.epoch_starts.last().expect("k_0 is always present")
    }

    /// `k_0, k_1, …, k_m`.
    pub fn epoch_starts(&self) -> &[u64] {
        &self.epoch_starts
    }

    pub fn history(&self) -> Option<&[(u64, usize)]> {
        self.history.as_deref()
    }

    /// One row per `(k, worker)` exchange, replayed from the history. `d` is
    /// `d_i^{k-1}`, the wait just before the exchange; `D` is `D_i^k`, the age of
    /// the contribution it delivers; `epoch` is the epoch after iteration `k`.
    pub fn exchange_log(&self) -> Option<Vec<ExchangeRecord>> {
        let log = self.history.as_deref()?;
        let mut replay = ExchangeLedger::new(self.workers(), false);
        let mut out = Vec::with_capacity(log.len());
        let mut i = 0;
        while i < log.len() {
            let k = log[i].0;
            let j = log[i..].iter().position(|&(kk, _)| kk != k).map_or(log.len(), |n| i + n);
            let workers: Vec<usize> = log[i..j].iter().map(|&(_, w)| w).collect();
            let waits: Vec<u64> = workers.iter().map(|&w| k - 1 - replay.last[w] as u64).collect();
            replay.record(k, &workers).expect("history is ordered");
            let epoch = replay.epoch_advance();
            for (&worker, d) in workers.iter().zip(waits) {
                out.push(ExchangeRecord {
                    k,
                    worker,
                    d,
                    big_d: (k as i64 - replay.prev[worker]) as u64,
                    epoch,
                });
            }
            i = j;
        }
        Some(out)
    }

    pub fn write_exchange_log(&self, path: &Path) -> Result<()> {
        let rows = self
            .exchange_log()
            .ok_or_else(|| Error::Config("exchange log needs a ledger with history".into()))?;
        let mut w = csv::Writer::from_path(path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub k: u64,
    pub worker: usize,
    pub d: u64,
    #[serde(rename = "D")]
    pub big_d: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone)]
pub struct MasterState {
    pub x: Vec<f64>,
    /// Running mean of the worker vectors. For PIAG this is the mean of the
    /// stale `γ∇f_i`; the `∇h` anchor is added at step time.
    pub ubar: Vec<f64>,
    pub k: u64,
    pub u_snapshot: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MasterOptions {
    /// Keep per-worker vectors and check the aggregate after every update.
    pub audit: bool,
    /// Recompute the aggregate from snapshots every `R` iterations.
    pub refresh_every: Option<u64>,
    pub keep_history: bool,
}

pub const AUDIT_TOLERANCE: f64 = 1e-10;

pub struct Master {
    state: MasterState,
    variant: AlgorithmVariant,
    ledger: ExchangeLedger,
    outstanding: Vec<bool>,
    messages: u64,
    options: MasterOptions,
    max_audit_residual: f64,
}

impl fmt::Debug for Master {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Master")
            .field("kind", &self.variant.kind)
            .field("k", &self.state.k)
            .field("epoch", &self.ledger.epoch())
            .field("messages", &self.messages)
            .finish()
    }
}

impl Master {
    pub fn new(variant: AlgorithmVariant, workers: usize, x0: Vec<f64>, options: MasterOptions) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        if !variant.step.geometry.in_interior(&x0) {
            return Err(Error::domain("x0 must lie in the interior of dom h"));
        }
        let n = x0.len();
        let keep_snapshots = options.audit || options.refresh_every.is_some();
        Ok(Master {
            state: MasterState {
                x: x0,
                ubar: vec![0.0; n],
                k: 0,
                u_snapshot: keep_snapshots.then(|| vec![vec![0.0; n]; workers]),
            },
            ledger: ExchangeLedger::new(workers, options.keep_history),
            outstanding: vec![false; workers],
            messages: 0,
            variant,
            options,
            max_audit_residual: 0.0,
        })
    }

    pub fn variant(&self) -> &AlgorithmVariant {
        &self.variant
    }

    pub fn state(&self) -> &MasterState {
        &self.state
    }

    pub fn x(&self) -> &[f64] {
        &self.state.x
    }

    pub fn iteration(&self) -> u64 {
        self.state.k
    }

    pub fn epoch(&self) -> u64 {
        self.ledger.epoch()
    }

    pub fn ledger(&self) -> &ExchangeLedger {
        &self.ledger
    }

    pub fn workers(&self) -> usize {
        self.outstanding.len()
    }

    /// Messages processed so far (warm-up included).
    pub fn messages(&self) -> u64 {
        self.messages
    }

    pub fn wants_snapshots(&self) -> bool {
        self.state.u_snapshot.is_some()
    }

    pub fn max_audit_residual(&self) -> f64 {
        self.max_audit_residual
    }

    /// Install the warm-up contributions computed at `x⁰` (one message per
    /// worker). The aggregate becomes their exact average and every worker has
    /// an outstanding query for `x⁰`.
    pub fn initialize(&mut self, messages: Vec<Message>) -> Result<()> {
        if self.state.k != 0 || self.messages != 0 {
            return Err(Error::Protocol("master already started".into()));
        }
        let vectors = self.collect_round(messages)?;
        let m = self.workers() as f64;
        let mut ubar = vec![0.0; self.state.x.len()];
        for v in &vectors {
            for (a, b) in ubar.iter_mut().zip(v) {
                *a += b;
            }
        }
        ubar.iter_mut().for_each(|a| *a /= m);
        self.state.ubar = ubar;
        if let Some(s) = self.state.u_snapshot.as_mut() {
            *s = vectors;
        }
        self.outstanding.iter_mut().for_each(|o| *o = true);
        self.audit()?;
        Ok(())
    }

    /// Checks a full round and returns the workers' vectors in worker order.
    fn collect_round(&mut self, messages: Vec<Message>) -> Result<Vec<Vec<f64>>> {
        let m = self.workers();
        if messages.len() != m {
            return Err(Error::Protocol(format!("a round needs {m} messages, got {}", messages.len())));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; m];
        for msg in messages {
            if msg.worker >= m || slots[msg.worker].is_some() {
                return Err(Error::Protocol(format!("unexpected message from worker {}", msg.worker)));
            }
            if msg.payload.vector().len() != self.state.x.len() {
                return Err(Error::Protocol("payload dimension mismatch".into()));
            }
            let full = match (&msg.payload, msg.snapshot) {
                (Payload::Contribution(u), _) => u.clone(),
                (_, Some(s)) => s,
                (p, None) => p.vector().to_vec(),
            };
            slots[msg.worker] = Some(full);
            self.messages += 1;
        }
        Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
    }

    fn check_payload(&self, msg: &Message) -> Result<()> {
        let ok = matches!(
            (self.variant.kind, &msg.payload),
            (AlgorithmKind::Dave, Payload::Adjustment(_))
                | (AlgorithmKind::Piag, Payload::GradientAdjustment(_))
                | (AlgorithmKind::Sync, Payload::Contribution(_))
        );
        if !ok {
            return Err(Error::Protocol(format!(
                "{} master received a {}",
                self.variant.kind,
                msg.payload.tag()
            )));
        }
        if msg.payload.vector().len() != self.state.x.len() {
            return Err(Error::Protocol("payload dimension mismatch".into()));
        }
        Ok(())
    }

    /// One asynchronous exchange: fold the worker's adjustment into the
    /// aggregate, take the proximal step, and return the point to send back.
    pub fn receive(&mut self, msg: Message) -> Result<&[f64]> {
        let k = self.state.k + 1;
        self.receive_inner(msg).map_err(|e| e.at(k))?;
        Ok(&self.state.x)
    }

    fn receive_inner(&mut self, msg: Message) -> Result<()> {
        let i = msg.worker;
        if i >= self.workers() || !self.outstanding[i] {
            return Err(Error::Protocol(format!("worker {i} has no outstanding query")));
        }
        if self.variant.kind == AlgorithmKind::Sync {
            return Err(Error::Protocol("synchronous masters only accept full rounds".into()));
        }
        self.check_payload(&msg)?;
        let m = self.workers() as f64;
        for (a, d) in self.state.ubar.iter_mut().zip(msg.payload.vector()) {
            *a += d / m;
        }
        if let Some(s) = self.state.u_snapshot.as_mut() {
            s[i] = match msg.snapshot {
                Some(full) => full,
                None => s[i].iter().zip(msg.payload.vector()).map(|(a, d)| a + d).collect(),
            };
        }
        self.messages += 1;
        self.state.k += 1;
        self.ledger.record(self.state.k, &[i])?;
        self.ledger.epoch_advance();
        self.maybe_refresh();
        self.audit()?;
        self.state.x = self.next_point()?;
        Ok(())
    }

    /// One synchronous iteration: every worker answered a query at the current point.
    pub fn receive_round(&mut self, messages: Vec<Message>) -> Result<&[f64]> {
        let k = self.state.k + 1;
        self.receive_round_inner(messages).map_err(|e| e.at(k))?;
        Ok(&self.state.x)
    }

    fn receive_round_inner(&mut self, messages: Vec<Message>) -> Result<()> {
        for msg in &messages {
            self.check_payload(msg)?;
        }
        let m = self.workers() as f64;
        if self.variant.kind == AlgorithmKind::Sync {
            let vectors = self.collect_round(messages)?;
            let mut ubar = vec![0.0; self.state.x.len()];
            for v in &vectors {
                for (a, b) in ubar.iter_mut().zip(v) {
                    *a += b;
                }
            }
            ubar.iter_mut().for_each(|a| *a /= m);
            self.state.ubar = ubar;
            if let Some(s) = self.state.u_snapshot.as_mut() {
                *s = vectors;
            }
        } else {
            if self.outstanding.iter().any(|o| !o) {
                return Err(Error::Protocol("round started with a released worker".into()));
            }
            let mut seen = vec![false; self.workers()];
            if messages.len() != seen.len() {
                return Err(Error::Protocol(format!(
                    "a round needs {} messages, got {}",
                    seen.len(),
                    messages.len()
                )));
            }
            for msg in messages {
                let i = msg.worker;
                if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Protocol(format!("unexpected message from worker {i}")));
                }
                let delta = msg.payload.vector();
                for (a, d) in self.state.ubar.iter_mut().zip(delta) {
                    *a += d / m;
                }
                if let Some(s) = self.state.u_snapshot.as_mut() {
                    s[i] = match msg.snapshot {
                        Some(full) => full,
                        None => s[i].iter().zip(delta).map(|(a, d)| a + d).collect(),
                    };
                }
                self.messages += 1;
            }
        }
        self.state.k += 1;
        let all: Vec<usize> = (0..self.workers()).collect();
        self.ledger.record(self.state.k, &all)?;
        self.ledger.epoch_advance();
        self.outstanding.iter_mut().for_each(|o| *o = true);
        self.maybe_refresh();
        self.audit()?;
        self.state.x = self.next_point()?;
        Ok(())
    }

    /// Stop expecting answers from `worker` (shutdown).
    pub fn release(&mut self, worker: usize) {
        if let Some(o) = self.outstanding.get_mut(worker) {
            *o = false;
        }
    }

    fn next_point(&self) -> Result<Vec<f64>> {
        let step = &self.variant.step;
        match self.variant.kind {
            AlgorithmKind::Sync | AlgorithmKind::Dave => step.apply(&self.state.ubar),
            AlgorithmKind::Piag => {
                let anchor = step.geometry.gradient(&self.state.x)?;
                let shifted: Vec<f64> = self.state.ubar.iter().zip(&anchor).map(|(g, h)| g - h).collect();
                step.apply(&shifted)
            }
        }
    }

    fn maybe_refresh(&mut self) {
        let (Some(r), Some(snap)) = (self.options.refresh_every, self.state.u_snapshot.as_ref()) else {
            return;
        };
        if r == 0 || !self.state.k.is_multiple_of(r) {
            return;
        }
        let m = snap.len() as f64;
        let mut ubar = vec![0.0; self.state.x.len()];
        for v in snap {
            for (a, b) in ubar.iter_mut().zip(v) {
                *a += b;
            }
        }
        ubar.iter_mut().for_each(|a| *a /= m);
        self.state.ubar = ubar;
    }

    /// `‖ū - (1/M) Σ u_i‖∞`, if snapshots are kept.
    pub fn aggregate_residual(&self) -> Option<f64> {
        let snap = self.state.u_snapshot.as_ref()?;
        let m = snap.len() as f64;
        let n = self.state.x.len();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let mean = snap.iter().map(|u| u[j]).sum::<f64>() / m;
            worst = worst.max((self.state.ubar[j] - mean).abs());
        }
        Some(worst)
    }

    fn audit(&mut self) -> Result<()> {
        if !self.options.audit {
            return Ok(());
        }
        let residual = self.aggregate_residual().unwrap_or(0.0);
        self.max_audit_residual = self.max_audit_residual.max(residual);
        let scale = 1.0 + self.state.ubar.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if residual > AUDIT_TOLERANCE * scale {
            return Err(Error::Protocol(format!(
                "aggregate drifted from the worker average by {residual:e}"
            )));
        }
        Ok(())
    }
}

/// Synchronous initialization: every worker computes at `x⁰` and the master
/// starts from the exact average of those contributions.
pub fn warm_up(master: &mut Master, workers: &mut [WorkerState], problem: &CompositeProblem, x0: &[f64]) -> Result<()> {
    let kind = master.variant().kind;
    let gamma = master.variant().step.gamma;
    let geometry = master.variant().step.geometry.clone();
    let attach = master.wants_snapshots();
    let messages = workers
        .iter_mut()
        .map(|w| w.message(kind, x0, problem, geometry.as_ref(), gamma, attach))
        .collect::<Result<Vec<_>>>()?;
    master.initialize(messages)
}

/// `master_receive` for callers holding the raw adjustment.
pub fn master_receive(master: &mut Master, worker: usize, delta: Vec<f64>) -> Result<Vec<f64>> {
    let payload = match master.variant().kind {
        AlgorithmKind::Piag => Payload::GradientAdjustment(delta),
        _ => Payload::Adjustment(delta),
    };
    master
        .receive(Message {
            worker,
            payload,
            snapshot: None,
        })
        .map(<[f64]>::to_vec)
}
