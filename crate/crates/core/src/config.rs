//! JSON experiment files and the drivers behind the CLI.
//!
//! One file describes the problem, geometry, algorithm, runtime and outputs.
//! Unknown keys are rejected. Every run starts from `x⁰ = 1`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgorithmKind, AlgorithmVariant};
use crate::error::{Error, Result};
use crate::geometry::GeometryKind;
use crate::harness::{run_traced, solve_reference, IterateTrace, Metrics, ReferenceSolution, SolveMeta, DEFAULT_TOLERANCE};
use crate::problem::{generate, CompositeProblem, DataGenConfig};
use crate::protocol::MasterOptions;
use crate::runtime::{Backend, DelayModel, RunConfig, RunReport, StopReason, TimeLaw};
use crate::step::{StepConfig, THEORY_MULTIPLIER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub algorithm: AlgorithmSection,
    pub runtime: RuntimeSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub n: usize,
    pub m: usize,
    pub workers: usize,
    /// `None` selects the data-dependent default.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_b_floor")]
    pub b_floor: f64,
    /// Load `A.csv`, `b.csv` and `meta.json` from here instead of generating.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_b_floor() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub name: GeometryKind,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            name: GeometryKind::Entropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    #[serde(default = "default_kind")]
    pub kind: AlgorithmKind,
    #[serde(default = "default_multiplier")]
    pub gamma_multiplier: f64,
    /// Variants run by `compare`.
    #[serde(default)]
    pub compare: Vec<AlgorithmKind>,
    /// Multipliers tried per variant by `compare`; empty means `[gamma_multiplier]`.
    #[serde(default)]
    pub gamma_grid: Vec<f64>,
}

fn default_kind() -> AlgorithmKind {
    AlgorithmKind::Dave
}

fn default_multiplier() -> f64 {
    THEORY_MULTIPLIER
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        AlgorithmSection {
            kind: default_kind(),
            gamma_multiplier: default_multiplier(),
            compare: Vec::new(),
            gamma_grid: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeSection {
    #[serde(default = "default_backend")]
    pub backend: Backend,
    pub factors: Vec<f64>,
    #[serde(default = "default_base_time")]
    pub base_time: TimeLaw,
    #[serde(default = "default_comm_time")]
    pub comm_time: TimeLaw,
    #[serde(default)]
    pub max_iterations: Option<u64>,
    /// Seconds: virtual under `event_sim`, wall-clock under `concurrent`.
    #[serde(default)]
    pub wall_budget: Option<f64>,
    #[serde(default)]
    pub stop_tolerance: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub barrier: bool,
    #[serde(default)]
    pub audit: bool,
    #[serde(default)]
    pub refresh_every: Option<u64>,
    #[serde(default = "default_time_unit")]
    pub time_unit_seconds: f64,
}

fn default_backend() -> Backend {
    Backend::EventSim
}

fn default_base_time() -> TimeLaw {
    TimeLaw::constant(1.0)
}

fn default_comm_time() -> TimeLaw {
    TimeLaw::constant(0.0)
}

fn default_time_unit() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub summary: Option<PathBuf>,
    /// Long-format CSV written by `compare`.
    #[serde(default)]
    pub compare: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub algo: Option<AlgorithmKind>,
    pub backend: Option<Backend>,
    /// Replaces both the data seed and the runtime seed.
    pub seed: Option<u64>,
    /// Directory receiving every output file.
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(k) = o.algo {
            self.algorithm.kind = k;
        }
        if let Some(b) = o.backend {
            self.runtime.backend = b;
        }
        if let Some(s) = o.seed {
            self.problem.seed = s;
            self.runtime.seed = s;
        }
        if let Some(dir) = &o.out {
            self.output = OutputSection {
                trace: Some(dir.join("trace.csv")),
                reference: Some(dir.join("reference.json")),
                summary: Some(dir.join("summary.json")),
                compare: Some(dir.join("compare.csv")),
            };
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.path.is_none() {
            self.data_config().validate()?;
        }
        let a = &self.algorithm;
        for g in std::iter::once(&a.gamma_multiplier).chain(&a.gamma_grid) {
            if !(*g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("stepsize multiplier {g} must be positive")));
            }
        }
        self.delay_model().validate(p.workers)?;
        self.run_config().validate()
    }

    pub fn data_config(&self) -> DataGenConfig {
        let p = &self.problem;
        DataGenConfig {
            n: p.n,
            m: p.m,
            workers: p.workers,
            seed: p.seed,
            b_floor: p.b_floor,
            lambda: p.lambda,
        }
    }

    pub fn build_problem(&self) -> Result<CompositeProblem> {
        match &self.problem.path {
            None => generate(&self.data_config()),
            Some(dir) => {
                let (problem, meta) = CompositeProblem::load(dir)?;
                let p = &self.problem;
                if (meta.n, meta.m, meta.workers) != (p.n, p.m, p.workers) {
                    return Err(Error::Config(format!(
                        "{} holds n={}, m={}, workers={}, the config says n={}, m={}, workers={}",
                        dir.display(),
                        meta.n,
                        meta.m,
                        meta.workers,
                        p.n,
                        p.m,
                        p.workers
                    )));
                }
                Ok(problem)
            }
        }
    }

    pub fn delay_model(&self) -> DelayModel {
        DelayModel {
            factors: self.runtime.factors.clone(),
            base_time: self.runtime.base_time,
            comm_time: self.runtime.comm_time,
        }
    }

    pub fn run_config(&self) -> RunConfig {
        let r = &self.runtime;
        RunConfig {
            backend: r.backend,
            max_iterations: r.max_iterations,
            wall_budget_seconds: r.wall_budget,
            stop_tolerance: r.stop_tolerance,
            seed: r.seed,
            barrier: r.barrier,
            time_unit_seconds: r.time_unit_seconds,
            master: MasterOptions {
                audit: r.audit,
                refresh_every: r.refresh_every,
                keep_history: false,
            },
        }
    }

    pub fn variant(&self, problem: &CompositeProblem, kind: AlgorithmKind, multiplier: f64) -> Result<AlgorithmVariant> {
        let step = StepConfig::for_problem(problem, self.geometry.name.build(), multiplier)?;
        Ok(AlgorithmVariant::new(kind, step))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// The problem and its reference solution, shared by every run of a config.
pub struct Prepared {
    pub problem: CompositeProblem,
    pub reference: ReferenceSolution,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let problem = config.build_problem()?;
    let gamma = THEORY_MULTIPLIER / problem.smoothness_constant();
    let reference = solve_reference(&problem, &config.geometry.name.build(), gamma, DEFAULT_TOLERANCE)?;
    if let Some(path) = &config.output.reference {
        ensure_parent(path)?;
        reference.save(path)?;
    }
    Ok(Prepared { problem, reference })
}

#[derive(Debug, Clone, Serialize)]
pub struct RowMetrics {
    pub k: u64,
    pub seconds: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub algorithm: AlgorithmKind,
    pub geometry: GeometryKind,
    pub backend: Backend,
    /// False for Bregman-PIAG, which is run for comparison only.
    pub convergence_guarantee: bool,
    /// Guarantee holds and `γ < 1/L`.
    pub convergence_grade: bool,
    pub gamma: f64,
    pub gamma_multiplier: f64,
    pub smoothness: f64,
    pub lambda: f64,
    pub workers: usize,
    pub iterations: u64,
    pub messages: u64,
    pub messages_sent: u64,
    pub epochs: u64,
    pub seconds: f64,
    pub stop: StopReason,
    pub initial: Option<RowMetrics>,
    #[serde(rename = "final")]
    pub last: Option<RowMetrics>,
    /// Simulated or wall seconds at which the F-gap first reached the stop tolerance.
    pub seconds_to_tolerance: Option<f64>,
    pub exchange_counts: Vec<u64>,
    pub max_delay: Vec<u64>,
    pub max_audit_residual: f64,
    pub f_star: f64,
    pub reference: SolveMeta,
}

fn row_metrics(trace: &IterateTrace, first: bool) -> Option<RowMetrics> {
    let r = if first { trace.first() } else { trace.last() }?;
    Some(RowMetrics {
        k: r.k,
        seconds: r.seconds,
        metrics: Metrics {
            dh_star: r.dh_star,
            dist2_star: r.dist2_star,
            f_gap: r.f_gap,
        },
    })
}

fn summarize(
    config: &ExperimentConfig,
    prepared: &Prepared,
    variant: &AlgorithmVariant,
    multiplier: f64,
    trace: &IterateTrace,
    report: &RunReport,
) -> RunSummary {
    let problem = &prepared.problem;
    let l = problem.smoothness_constant();
    RunSummary {
        algorithm: variant.kind,
        geometry: config.geometry.name,
        backend: report.backend,
        convergence_guarantee: variant.kind.has_convergence_guarantee(),
        convergence_grade: variant.is_convergence_grade(l),
        gamma: variant.step.gamma,
        gamma_multiplier: multiplier,
        smoothness: l,
        lambda: problem.lambda(),
        workers: problem.workers(),
        iterations: report.iterations,
        messages: report.messages,
        messages_sent: report.messages_sent,
        epochs: report.epochs,
        seconds: report.seconds,
        stop: report.stop,
        initial: row_metrics(trace, true),
        last: row_metrics(trace, false),
        seconds_to_tolerance: config
            .runtime
            .stop_tolerance
            .and_then(|tol| trace.first_below(tol))
            .map(|r| r.seconds),
        exchange_counts: report.exchange_counts.clone(),
        max_delay: report.max_delay.clone(),
        max_audit_residual: report.max_audit_residual,
        f_star: prepared.reference.f_star,
        reference: prepared.reference.meta.clone(),
    }
}

fn execute(
    config: &ExperimentConfig,
    prepared: &Prepared,
    kind: AlgorithmKind,
    multiplier: f64,
    csv: Option<&Path>,
) -> Result<(IterateTrace, RunSummary)> {
    let variant = config.variant(&prepared.problem, kind, multiplier)?;
    if let Some(path) = csv {
        ensure_parent(path)?;
    }
    let x0 = vec![1.0; prepared.problem.dim()];
    let (trace, report) = run_traced(
        &variant,
        &prepared.problem,
        &x0,
        &config.delay_model(),
        &config.run_config(),
        &prepared.reference,
        csv,
    )?;
    let summary = summarize(config, prepared, &variant, multiplier, &trace, &report);
    Ok((trace, summary))
}

/// One run of `config.algorithm.kind`. Writes the trace, reference and summary
/// files named in the output section.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(IterateTrace, RunSummary)> {
    let prepared = prepare(config)?;
    let (trace, summary) = execute(
        config,
        &prepared,
        config.algorithm.kind,
        config.algorithm.gamma_multiplier,
        config.output.trace.as_deref(),
    )?;
    if let Some(path) = &config.output.summary {
        write_json(path, &summary)?;
    }
    Ok((trace, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRun {
    pub variant: AlgorithmKind,
    pub gamma_multiplier: f64,
    pub summary: Option<RunSummary>,
    /// Numerical failure of this setting (e.g. an oversized stepsize).
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BestRun {
    pub variant: AlgorithmKind,
    pub gamma_multiplier: f64,
    pub final_f_gap: f64,
    pub seconds_to_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub runs: Vec<GridRun>,
    pub best: Vec<BestRun>,
}

#[derive(Debug, Serialize)]
struct CompareRow {
    variant: AlgorithmKind,
    gamma_multiplier: f64,
    k: u64,
    seconds: f64,
    worker: i64,
    epoch: u64,
    dh_star: f64,
    dist2_star: f64,
    f_gap: f64,
}

/// Every listed variant over every grid multiplier on the same problem and
/// delay model. Rows of all traces go to one long-format CSV.
pub fn compare(config: &ExperimentConfig) -> Result<CompareSummary> {
    let mut variants = config.algorithm.compare.clone();
    variants.dedup();
    if variants.len() < 2 {
        return Err(Error::Config(
            "compare needs at least two variants in algorithm.compare".into(),
        ));
    }
    let grid = if config.algorithm.gamma_grid.is_empty() {
        vec![config.algorithm.gamma_multiplier]
    } else {
        config.algorithm.gamma_grid.clone()
    };
    let prepared = prepare(config)?;
    let mut writer = match &config.output.compare {
        Some(path) => {
            ensure_parent(path)?;
            Some(csv::Writer::from_path(path)?)
        }
        None => None,
    };
    let mut runs = Vec::new();
    for &kind in &variants {
        for &mult in &grid {
            match execute(config, &prepared, kind, mult, None) {
                Ok((trace, summary)) => {
                    if let Some(w) = writer.as_mut() {
                        for r in &trace.rows {
                            w.serialize(CompareRow {
                                variant: kind,
                                gamma_multiplier: mult,
                                k: r.k,
                                seconds: r.seconds,
                                worker: r.worker,
                                epoch: r.epoch,
                                dh_star: r.dh_star,
                                dist2_star: r.dist2_star,
                                f_gap: r.f_gap,
                            })?;
                        }
                    }
                    runs.push(GridRun {
                        variant: kind,
                        gamma_multiplier: mult,
                        summary: Some(summary),
                        error: None,
                    });
                }
                Err(e) if e.is_numerical() => runs.push(GridRun {
                    variant: kind,
                    gamma_multiplier: mult,
                    summary: None,
                    error: Some(e.to_string()),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush().map_err(|e| Error::io("compare.csv", e))?;
    }
    let best = variants.iter().filter_map(|&kind| best_run(&runs, kind)).collect();
    let summary = CompareSummary { runs, best };
    if let Some(path) = &config.output.summary {
        write_json(path, &summary)?;
    }
    Ok(summary)
}

/// Earliest time to tolerance, then lowest final F-gap.
fn best_run(runs: &[GridRun], kind: AlgorithmKind) -> Option<BestRun> {
    runs.iter()
        .filter(|r| r.variant == kind)
        .filter_map(|r| {
            let s = r.summary.as_ref()?;
            let gap = s.last.as_ref()?.metrics.f_gap;
            Some(BestRun {
                variant: kind,
                gamma_multiplier: r.gamma_multiplier,
                final_f_gap: gap,
                seconds_to_tolerance: s.seconds_to_tolerance,
            })
        })
        .min_by(|a, b| {
            let ta = a.seconds_to_tolerance.unwrap_or(f64::INFINITY);
            let tb = b.seconds_to_tolerance.unwrap_or(f64::INFINITY);
            ta.total_cmp(&tb).then(a.final_f_gap.total_cmp(&b.final_f_gap))
        })
}
