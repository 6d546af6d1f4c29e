//! Per-iterate metrics and CSV traces.
//!
//! Divergences are taken as `D_h(x*, x^k)`: solution first, iterate second.
//! This is the quantity the convergence analysis bounds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::reference::ReferenceSolution;
use crate::algorithms::AlgorithmVariant;
use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::problem::CompositeProblem;
use crate::runtime::{self, Control, DelayModel, Observer, RunConfig, RunReport, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dh_star: f64,
    pub dist2_star: f64,
    pub f_gap: f64,
}

/// `(D_h(x*, x), ‖x - x*‖², F(x) - F*)`.
pub fn evaluate(
    problem: &CompositeProblem,
    geometry: &dyn Geometry,
    x: &[f64],
    reference: &ReferenceSolution,
) -> Result<Metrics> {
    let x_star = &reference.x_star;
    Ok(Metrics {
        dh_star: geometry.divergence(x_star, x)?,
        dist2_star: x.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum(),
        f_gap: problem.full_objective(x)? - reference.f_star,
    })
}

/// One trace line. Field order is the CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: u64,
    pub seconds: f64,
    /// `-1` for rows not produced by a single worker's message.
    pub worker: i64,
    pub epoch: u64,
    pub dh_star: f64,
    pub dist2_star: f64,
    pub f_gap: f64,
}

pub const TRACE_HEADER: &str = "k,seconds,worker,epoch,dh_star,dist2_star,f_gap";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterateTrace {
    pub rows: Vec<TraceRow>,
}

impl IterateTrace {
    pub fn first(&self) -> Option<&TraceRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// First row at which the F-gap is at most `tol`.
    pub fn first_below(&self, tol: f64) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.f_gap <= tol)
    }

    /// `max D_h(x*, x^k)` over each epoch, in epoch order.
    pub fn epoch_maxima(&self) -> Vec<(u64, f64)> {
        let mut out: Vec<(u64, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some((e, m)) if *e == r.epoch => *m = m.max(r.dh_star),
                _ => out.push((r.epoch, r.dh_star)),
            }
        }
        out
    }

    /// Largest increase of the epoch maximum from one epoch to the next.
    pub fn worst_epoch_increase(&self) -> f64 {
        self.epoch_maxima()
            .windows(2)
            .map(|w| w[1].1 - w[0].1)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `k` strictly increasing, epochs nondecreasing, metrics finite.
    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if w[1].k <= w[0].k || w[1].epoch < w[0].epoch {
                return Err(Error::Protocol(format!("trace out of order at k = {}", w[1].k)));
            }
        }
        if let Some(r) = self
            .rows
            .iter()
            .find(|r| !(r.dh_star.is_finite() && r.dist2_star.is_finite() && r.f_gap.is_finite()))
        {
            return Err(Error::domain(format!("non-finite metric at k = {}", r.k)));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<TraceRow>, _>>()?;
        Ok(IterateTrace { rows })
    }
}

const FLUSH_EVERY: u64 = 256;

/// Observer that evaluates every iterate, streams rows to CSV and stops the
/// run once the F-gap reaches the tolerance.
pub struct TraceRecorder<'a> {
    problem: &'a CompositeProblem,
    geometry: Arc<dyn Geometry>,
    reference: &'a ReferenceSolution,
    stop_tolerance: Option<f64>,
    sink: Option<csv::Writer<Box<dyn Write + Send + 'a>>>,
    rows: Vec<TraceRow>,
    keep_rows: bool,
    seen: u64,
}

impl<'a> TraceRecorder<'a> {
    pub fn new(problem: &'a CompositeProblem, geometry: Arc<dyn Geometry>, reference: &'a ReferenceSolution) -> Self {
        TraceRecorder {
            problem,
            geometry,
            reference,
            stop_tolerance: None,
            sink: None,
            rows: Vec::new(),
            keep_rows: true,
            seen: 0,
        }
    }

    pub fn stop_at(mut self, tolerance: Option<f64>) -> Self {
        self.stop_tolerance = tolerance;
        self
    }

    pub fn stream_to(mut self, writer: impl Write + Send + 'a) -> Self {
        self.sink = Some(csv::Writer::from_writer(Box::new(writer)));
        self
    }

    pub fn stream_to_file(self, path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(self.stream_to(BufWriter::new(file)))
    }

    /// Keep only the last row in memory (the CSV still gets all of them).
    pub fn discard_rows(mut self) -> Self {
        self.keep_rows = false;
        self
    }

    pub fn finish(mut self) -> Result<IterateTrace> {
        if let Some(w) = self.sink.as_mut() {
            w.flush().map_err(|e| Error::io("trace", e))?;
        }
        Ok(IterateTrace { rows: self.rows })
    }
}

impl Observer for TraceRecorder<'_> {
    fn observe(&mut self, s: &Snapshot<'_>) -> Result<Control> {
        let m = evaluate(self.problem, self.geometry.as_ref(), s.x, self.reference).map_err(|e| e.at(s.k))?;
        let row = TraceRow {
            k: s.k,
            seconds: s.seconds,
            worker: s.worker.map_or(-1, |w| w as i64),
            epoch: s.epoch,
            dh_star: m.dh_star,
            dist2_star: m.dist2_star,
            f_gap: m.f_gap,
        };
        if let Some(w) = self.sink.as_mut() {
            w.serialize(row)?;
            self.seen += 1;
            if self.seen.is_multiple_of(FLUSH_EVERY) {
                w.flush().map_err(|e| Error::io("trace", e))?;
            }
        }
        if !self.keep_rows {
            self.rows.clear();
        }
        self.rows.push(row);
        Ok(match self.stop_tolerance {
            Some(tol) if row.f_gap <= tol => Control::Stop,
            _ => Control::Continue,
        })
    }
}

/// A run with a [`TraceRecorder`] attached; stops at `config.stop_tolerance`.
pub fn run_traced(
    variant: &AlgorithmVariant,
    problem: &CompositeProblem,
    x0: &[f64],
    delays: &DelayModel,
    config: &RunConfig,
    reference: &ReferenceSolution,
    csv_path: Option<&Path>,
) -> Result<(IterateTrace, RunReport)> {
    let mut recorder = TraceRecorder::new(problem, variant.step.geometry.clone(), reference).stop_at(config.stop_tolerance);
    if let Some(path) = csv_path {
        recorder = recorder.stream_to_file(path)?;
    }
    let report = runtime::run(variant, problem, x0, delays, config, &mut recorder)?;
    Ok((recorder.finish()?, report))
}
