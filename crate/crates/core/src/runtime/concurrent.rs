//! Threaded backend: one thread per worker, the master on the caller's
//! thread and a recorder thread that runs the observer off the master's
//! critical path. Threads share nothing mutable; everything goes through
//! FIFO channels.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{Control, DelayModel, DelayTracker, Observer, RunConfig, RunReport, Snapshot, StopReason};
use crate::algorithms::{AlgorithmKind, AlgorithmVariant};
use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::problem::CompositeProblem;
use crate::protocol::{Master, Message, WorkerState};

struct OwnedSnapshot {
    k: u64,
    seconds: f64,
    worker: Option<usize>,
    epoch: u64,
    x: Vec<f64>,
}

struct WorkerCtx<'a> {
    state: WorkerState,
    kind: AlgorithmKind,
    problem: &'a CompositeProblem,
    geometry: Arc<dyn Geometry>,
    gamma: f64,
    attach: bool,
    delays: &'a DelayModel,
    unit: f64,
    rng: ChaCha20Rng,
}

impl WorkerCtx<'_> {
    /// Answers queries until the master hangs up. Returns the number of messages delivered.
    fn serve(mut self, queries: Receiver<Arc<Vec<f64>>>, answers: Sender<Result<Message>>) -> u64 {
        let mut sent = 0;
        while let Ok(x) = queries.recv() {
            let started = Instant::now();
            let msg = self
                .state
                .message(self.kind, &x, self.problem, self.geometry.as_ref(), self.gamma, self.attach);
            let failed = msg.is_err();
            let delay = self.delays.turnaround(self.state.id, &mut self.rng) * self.unit;
            if let Some(rest) = Duration::from_secs_f64(delay).checked_sub(started.elapsed()) {
                thread::sleep(rest);
            }
            if answers.send(msg).is_err() {
                break;
            }
            sent += 1;
            if failed {
                break;
            }
        }
        sent
    }
}

fn record(observer: &mut (dyn Observer + Send), snapshots: Receiver<OwnedSnapshot>, stop: Sender<()>) -> Result<()> {
    for s in snapshots {
        let view = Snapshot {
            k: s.k,
            seconds: s.seconds,
            worker: s.worker,
            epoch: s.epoch,
            x: &s.x,
        };
        if observer.observe(&view)? == Control::Stop {
            let _ = stop.send(());
            break;
        }
    }
    Ok(())
}

struct MasterLoop<'a> {
    master: &'a mut Master,
    tracker: DelayTracker,
    queries: Vec<Sender<Arc<Vec<f64>>>>,
    answers: Receiver<Result<Message>>,
    snapshots: Sender<OwnedSnapshot>,
    stop: Receiver<()>,
    started: Instant,
    config: &'a RunConfig,
}

impl MasterLoop<'_> {
    fn broadcast(&self, x: &[f64]) -> Result<()> {
        let x = Arc::new(x.to_vec());
        for q in &self.queries {
            q.send(x.clone()).map_err(|_| Error::Protocol("worker hung up".into()))?;
        }
        Ok(())
    }

    fn next_message(&self) -> Result<Message> {
        let k = self.master.iteration() + 1;
        match self.answers.recv() {
            Ok(msg) => msg.map_err(|e| e.at(k)),
            Err(_) => Err(Error::Protocol("all workers hung up".into()).at(k)),
        }
    }

    fn gather(&self) -> Result<Vec<Message>> {
        let mut msgs = (0..self.queries.len())
            .map(|_| self.next_message())
            .collect::<Result<Vec<_>>>()?;
        msgs.sort_by_key(|m| m.worker);
        Ok(msgs)
    }

    /// Returns false once the recorder is gone or asked to stop.
    fn emit(&self, worker: Option<usize>) -> bool {
        let snap = OwnedSnapshot {
            k: self.master.iteration(),
            seconds: self.started.elapsed().as_secs_f64(),
            worker,
            epoch: self.master.epoch(),
            x: self.master.x().to_vec(),
        };
        self.snapshots.send(snap).is_ok()
    }

    fn should_stop(&self) -> Option<StopReason> {
        if self.stop.try_recv().is_ok() {
            return Some(StopReason::Observer);
        }
        if self.config.max_iterations.is_some_and(|m| self.master.iteration() >= m) {
            return Some(StopReason::MaxIterations);
        }
        if self
            .config
            .wall_budget_seconds
            .is_some_and(|b| self.started.elapsed().as_secs_f64() > b)
        {
            return Some(StopReason::WallBudget);
        }
        None
    }

    fn finish(self) -> Vec<u64> {
        self.tracker.into_inner()
    }

    fn drive(&mut self) -> Result<StopReason> {
        let kind = self.master.variant().kind;
        let rounds = kind == AlgorithmKind::Sync || self.config.barrier;
        let x0 = self.master.x().to_vec();
        if kind.is_asynchronous() {
            self.broadcast(&x0)?;
            let first = self.gather()?;
            self.master.initialize(first)?;
        }
        if !self.emit(None) {
            return Ok(StopReason::Observer);
        }
        if !rounds {
            self.broadcast(&x0)?;
        }
        loop {
            if let Some(reason) = self.should_stop() {
                return Ok(reason);
            }
            let worker = if rounds {
                self.broadcast(self.master.x())?;
                let msgs = self.gather()?;
                self.master.receive_round(msgs)?;
                None
            } else {
                let msg = self.next_message()?;
                let i = msg.worker;
                let x = self.master.receive(msg)?.to_vec();
                self.queries[i]
                    .send(Arc::new(x))
                    .map_err(|_| Error::Protocol(format!("worker {i} hung up")))?;
                Some(i)
            };
            self.tracker.update(self.master)?;
            if !self.emit(worker) {
                return Ok(StopReason::Observer);
            }
        }
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
    let m = problem.workers();
    let mut master = Master::new(variant.clone(), m, x0.to_vec(), config.master)?;
    let started = Instant::now();
    let (stop, sent, recorded) = thread::scope(|scope| {
        let (answer_tx, answers) = mpsc::channel();
        let mut queries = Vec::with_capacity(m);
        let mut handles = Vec::with_capacity(m);
        for i in 0..m {
            let (tx, rx) = mpsc::channel();
            queries.push(tx);
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let ctx = WorkerCtx {
                state: WorkerState::new(i, problem.dim()),
                kind: variant.kind,
                problem,
                geometry: variant.step.geometry.clone(),
                gamma: variant.step.gamma,
                attach: master.wants_snapshots(),
                delays,
                unit: config.time_unit_seconds,
                rng,
            };
            let tx = answer_tx.clone();
            handles.push(scope.spawn(move || ctx.serve(rx, tx)));
        }
        drop(answer_tx);

        let (snap_tx, snap_rx) = mpsc::channel();
        let (stop_tx, stop_rx) = mpsc::channel();
        let recorder = scope.spawn(move || record(observer, snap_rx, stop_tx));

        let mut driver = MasterLoop {
            master: &mut master,
            tracker: DelayTracker::new(m),
            queries,
            answers,
            snapshots: snap_tx,
            stop: stop_rx,
            started,
            config,
        };
        let stop = driver.drive();
        // dropping the driver closes every channel end it owns, so workers and recorder wind down
        let max_delay = driver.finish();
        let sent: u64 = handles.into_iter().map(|h| h.join().expect("worker thread panicked")).sum();
        let recorded = recorder.join().expect("recorder thread panicked");
        (stop.map(|s| (s, max_delay)), sent, recorded)
    });
    let (stop, max_delay) = stop?;
    recorded?;
    let ledger = master.ledger();
    Ok(RunReport {
        backend: config.backend,
        iterations: master.iteration(),
        messages: master.messages(),
        messages_sent: sent,
        epochs: master.epoch(),
        seconds: started.elapsed().as_secs_f64(),
        stop,
        exchange_counts: (0..m).map(|i| ledger.exchange_count(i)).collect(),
        max_delay,
        max_audit_residual: master.max_audit_residual(),
        x: master.x().to_vec(),
    })
}
