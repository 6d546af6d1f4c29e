//! Numerical property checks, grouped into families that can be run alone.
//!
//! Each check reports the worst value of its test statistic next to the
//! tolerance it must stay under. Inequalities are checked as
//! `lhs - rhs ≤ slack`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::reference::{solve_reference, ReferenceSolution, DEFAULT_TOLERANCE};
use super::trace::TraceRecorder;
use crate::algorithms::{AlgorithmKind, AlgorithmVariant};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, GeometryKind};
use crate::problem::{generate, CompositeProblem, DataGenConfig, DenseMatrix};
use crate::protocol::{MasterOptions, AUDIT_TOLERANCE};
use crate::runtime::{self, DelayModel, EventSim, RunConfig};
use crate::step::{StepConfig, THEORY_MULTIPLIER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckFamily {
    Geometry,
    Gradient,
    Prox,
    Contraction,
    Smoothness,
    Epoch,
    Descent,
    Audit,
}

impl CheckFamily {
    pub const ALL: [CheckFamily; 8] = [
        CheckFamily::Geometry,
        CheckFamily::Gradient,
        CheckFamily::Prox,
        CheckFamily::Contraction,
        CheckFamily::Smoothness,
        CheckFamily::Epoch,
        CheckFamily::Descent,
        CheckFamily::Audit,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CheckFamily::Geometry => "geometry",
            CheckFamily::Gradient => "gradient",
            CheckFamily::Prox => "prox",
            CheckFamily::Contraction => "contraction",
            CheckFamily::Smoothness => "smoothness",
            CheckFamily::Epoch => "epoch",
            CheckFamily::Descent => "descent",
            CheckFamily::Audit => "audit",
        }
    }
}

impl fmt::Display for CheckFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CheckFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|f| f.label() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|f| f.label()).collect();
            Error::Config(format!("unknown check family {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub family: CheckFamily,
    pub name: String,
    pub samples: usize,
    /// Worst observed value of the statistic.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: Option<String>,
}

impl CheckResult {
    fn measured(family: CheckFamily, name: impl Into<String>, samples: usize, worst: f64, tolerance: f64) -> Self {
        CheckResult {
            family,
            name: name.into(),
            samples,
            worst,
            tolerance,
            // NaN fails
            passed: worst <= tolerance,
            detail: None,
        }
    }

    fn errored(family: CheckFamily, name: impl Into<String>, err: &Error) -> Self {
        CheckResult {
            family,
            name: name.into(),
            samples: 0,
            worst: f64::NAN,
            tolerance: f64::NAN,
            passed: false,
            detail: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Stepsize multiplier on `1/L` for the run-based families.
    pub gamma_multiplier: f64,
    pub only: Option<CheckFamily>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            gamma_multiplier: THEORY_MULTIPLIER,
            only: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub gamma_multiplier: f64,
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn family_passed(&self, family: CheckFamily) -> Option<bool> {
        let mut rs = self.results.iter().filter(|r| r.family == family).peekable();
        rs.peek()?;
        Some(rs.all(|r| r.passed))
    }

    /// Plain-text pass/fail table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<34} {:>7} {:>12} {:>10}  result\n",
            "family", "check", "samples", "worst", "tolerance"
        );
        for r in &self.results {
            out += &format!(
                "{:<12} {:<34} {:>7} {:>12.3e} {:>10.1e}  {}\n",
                r.family.label(),
                r.name,
                r.samples,
                r.worst,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            );
            if let Some(d) = &r.detail {
                out += &format!("{:<12} {d}\n", "");
            }
        }
        out
    }
}

/// Per-family seed, so that `--only` reproduces the same samples as a full run.
fn family_rng(seed: u64, family: CheckFamily) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(family as u64 + 1);
    rng
}

pub fn property_suite(options: &SuiteOptions) -> SuiteReport {
    let mut results = Vec::new();
    for family in CheckFamily::ALL {
        if options.only.is_some_and(|o| o != family) {
            continue;
        }
        let mut rng = family_rng(options.seed, family);
        let mult = options.gamma_multiplier;
        match family {
            CheckFamily::Geometry => results.extend(geometry_checks(&mut rng, 200)),
            CheckFamily::Gradient => results.push(gradient_check(&mut rng, 50, &|p, i, x| p.local_gradient(i, x))),
            CheckFamily::Prox => results.extend(prox_checks(&mut rng, 1000)),
            CheckFamily::Contraction => results.push(contraction_check(&mut rng, 200, Some(mult))),
            CheckFamily::Smoothness => results.push(smoothness_check(&mut rng, 5, 1000)),
            CheckFamily::Epoch => results.extend(epoch_checks(&mut rng, mult, 3000)),
            CheckFamily::Descent => results.push(descent_check(&mut rng, mult, 1500)),
            CheckFamily::Audit => results.extend(audit_checks(&mut rng, 10_000)),
        }
    }
    SuiteReport {
        seed: options.seed,
        gamma_multiplier: options.gamma_multiplier,
        results,
    }
}

fn interior_point<R: Rng>(rng: &mut R, n: usize, spread: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-spread..spread).exp()).collect()
}

/// Small random instance with `M` workers and `rows_per_worker` rows each.
pub fn random_instance<R: Rng>(rng: &mut R, n: usize, workers: usize, rows_per_worker: usize) -> CompositeProblem {
    let m = workers * rows_per_worker;
    let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.05..1.0)).collect();
    let a = DenseMatrix::from_row_major(m, n, data).expect("sizes match");
    let b: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..3.0)).collect();
    let lambda = rng.random_range(0.0..0.3);
    CompositeProblem::new(a, b, lambda, workers).expect("valid random instance")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

pub fn geometry_checks<R: Rng>(rng: &mut R, samples: usize) -> Vec<CheckResult> {
    let fam = CheckFamily::Geometry;
    let mut out = Vec::new();
    for kind in [GeometryKind::Entropy, GeometryKind::Euclidean] {
        let geom = kind.build();
        let run = |rng: &mut R| -> Result<[f64; 4]> {
            let mut worst = [f64::NEG_INFINITY; 4];
            for _ in 0..samples {
                let n = rng.random_range(1..=6);
                let (x, y, z) = (
                    interior_point(rng, n, 2.0),
                    interior_point(rng, n, 2.0),
                    interior_point(rng, n, 2.0),
                );
                let dxy = geom.divergence(&x, &y)?;
                worst[0] = worst[0].max(-dxy);
                worst[1] = worst[1].max(geom.divergence(&x, &x)?.abs());
                // three-point identity
                let gy = geom.gradient(&y)?;
                let gz = geom.gradient(&z)?;
                let cross: f64 = gy
                    .iter()
                    .zip(&gz)
                    .zip(x.iter().zip(&y))
                    .map(|((a, b), (c, d))| (a - b) * (c - d))
                    .sum();
                let dxz = geom.divergence(&x, &z)?;
                let dyz = geom.divergence(&y, &z)?;
                let scale = 1.0 + dxz.abs() + dxy.abs() + dyz.abs() + cross.abs();
                worst[2] = worst[2].max((dxz - dxy - dyz - cross).abs() / scale);
                // gradient against central differences of h
                let g = geom.gradient(&x)?;
                for j in 0..n {
                    let h = 1e-6 * x[j];
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (geom.value(&xp)? - geom.value(&xm)?) / (2.0 * h);
                    worst[3] = worst[3].max((fd - g[j]).abs() / (1.0 + g[j].abs()));
                }
            }
            Ok(worst)
        };
        let names = [
            "divergence nonnegative",
            "divergence vanishes on diagonal",
            "three-point identity",
            "gradient vs finite differences",
        ];
        let tols = [1e-12, 1e-14, 1e-10, 1e-6];
        match run(rng) {
            Ok(worst) => {
                for q in 0..4 {
                    out.push(CheckResult::measured(
                        fam,
                        format!("{kind}: {}", names[q]),
                        samples,
                        worst[q],
                        tols[q],
                    ));
                }
            }
            Err(e) => out.push(CheckResult::errored(fam, kind.name(), &e)),
        }
    }
    out
}

pub type GradientFn<'a> = dyn Fn(&CompositeProblem, usize, &[f64]) -> Result<Vec<f64>> + 'a;

/// Central finite differences of `f_i` against `gradient`, which is injectable
/// so the check itself can be tested against a broken gradient.
pub fn gradient_check<R: Rng>(rng: &mut R, instances: usize, gradient: &GradientFn<'_>) -> CheckResult {
    let fam = CheckFamily::Gradient;
    let name = "local gradient vs finite differences";
    let mut worst: f64 = 0.0;
    let mut samples = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=6);
        let workers = rng.random_range(1..=3);
        let rows = rng.random_range(1..=3);
        let p = random_instance(rng, n, workers, rows);
        let x = interior_point(rng, n, 1.0);
        for i in 0..workers {
            let g = match gradient(&p, i, &x) {
                Ok(g) => g,
                Err(e) => return CheckResult::errored(fam, name, &e),
            };
            for j in 0..n {
                let h = 1e-6 * x[j];
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[j] += h;
                xm[j] -= h;
                let fd = match (p.local_loss(i, &xp), p.local_loss(i, &xm)) {
                    (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
                    (Err(e), _) | (_, Err(e)) => return CheckResult::errored(fam, name, &e),
                };
                worst = worst.max((fd - g[j]).abs() / (1.0 + g[j].abs()));
                samples += 1;
            }
        }
    }
    CheckResult::measured(fam, name, samples, worst, 1e-6)
}

/// Closed form against the bisection oracle on `coordinates` random
/// coordinates, plus the identity case `γ∇f = 0, λ = 0`.
pub fn prox_checks<R: Rng>(rng: &mut R, coordinates: usize) -> Vec<CheckResult> {
    let fam = CheckFamily::Prox;
    let mut out = Vec::new();
    for kind in [GeometryKind::Entropy, GeometryKind::Euclidean] {
        let geom = kind.build();
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for _ in 0..coordinates {
            let gamma = rng.random_range(0.01..2.0);
            let lambda = rng.random_range(0.0..1.0);
            let u = rng.random_range(-8.0..8.0);
            let step = StepConfig::new(gamma, lambda, geom.clone()).expect("valid step");
            match (step.apply(&[u]), step.apply_oracle(&[u])) {
                (Ok(a), Ok(o)) => worst = worst.max((a[0] - o[0]).abs() / (1.0 + o[0].abs())),
                (Err(e), _) | (_, Err(e)) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let name = format!("{kind}: closed form vs oracle");
        out.push(match failure {
            Some(e) => CheckResult::errored(fam, name, &e),
            None => CheckResult::measured(fam, name, coordinates, worst, 1e-8),
        });

        let mut worst: f64 = 0.0;
        let trials = 100;
        for _ in 0..trials {
            let x = interior_point(rng, 5, 3.0);
            let step = StepConfig::new(rng.random_range(0.01..2.0), 0.0, geom.clone()).expect("valid step");
            let ubar: Vec<f64> = geom.gradient(&x).expect("interior").iter().map(|g| -g).collect();
            let y = step.apply(&ubar).expect("in range");
            for (a, b) in y.iter().zip(&x) {
                worst = worst.max((a - b).abs() / b.abs());
            }
        }
        out.push(CheckResult::measured(
            fam,
            format!("{kind}: identity at zero gradient"),
            trials,
            worst,
            1e-12,
        ));
    }
    out
}

/// The contraction inequality for one synchronous step from arbitrary worker
/// points `y_i`, any `γ > 0` and any feasible `u`:
/// `D(u, T(y)) ≤ (1/M)Σ D(u, y_i) - (1-γL)/M Σ D(T(y), y_i) - γ(F(T(y)) - F(u))`.
///
/// Half the samples draw `γ` uniformly from `(0, 2/L)`; with `multiplier` set,
/// the other half use `γ = multiplier/L`.
pub fn contraction_check<R: Rng>(rng: &mut R, instances: usize, multiplier: Option<f64>) -> CheckResult {
    let fam = CheckFamily::Contraction;
    let name = "contraction inequality";
    let geom = GeometryKind::Entropy.build();
    let mut worst = f64::NEG_INFINITY;
    for s in 0..instances {
        let n = rng.random_range(1..=5);
        let workers = rng.random_range(1..=3);
        let rows = rng.random_range(1..=3);
        let p = random_instance(rng, n, workers, rows);
        let l = p.smoothness_constant();
        let gamma = match multiplier {
            Some(mult) if s % 2 == 1 => mult / l,
            _ => rng.random_range(1e-3..2.0) / l,
        };
        let ys: Vec<Vec<f64>> = (0..workers).map(|_| interior_point(rng, n, 1.5)).collect();
        let u: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    rng.random_range(-1.5f64..1.5).exp()
                }
            })
            .collect();
        let eval = || -> Result<f64> {
            let step = StepConfig::new(gamma, p.lambda(), geom.clone())?;
            let mut ubar = vec![0.0; n];
            for (i, y) in ys.iter().enumerate() {
                let g = p.local_gradient(i, y)?;
                let gh = geom.gradient(y)?;
                for j in 0..n {
                    ubar[j] += (gamma * g[j] - gh[j]) / workers as f64;
                }
            }
            let t = step.apply(&ubar)?;
            let m = workers as f64;
            let lhs = geom.divergence(&u, &t)?;
            let mut rhs = -gamma * (p.full_objective(&t)? - p.full_objective(&u)?);
            for y in &ys {
                rhs += geom.divergence(&u, y)? / m - (1.0 - gamma * l) * geom.divergence(&t, y)? / m;
            }
            Ok(lhs - rhs)
        };
        match eval() {
            Ok(v) => worst = worst.max(v),
            Err(e) => return CheckResult::errored(fam, name, &e),
        }
    }
    CheckResult::measured(fam, name, instances, worst, 1e-8)
}

/// `f(y) ≤ f(x) + <∇f(x), y - x> + L D_h(y, x)` for every shard loss and the
/// full data loss, with `L` the largest column sum of `A`.
pub fn smoothness_check<R: Rng>(rng: &mut R, instances: usize, pairs: usize) -> CheckResult {
    let fam = CheckFamily::Smoothness;
    let name = "relative smoothness";
    let geom = GeometryKind::Entropy.build();
    let mut worst = f64::NEG_INFINITY;
    let mut samples = 0;
    for s in 0..instances {
        let p = if s == 0 {
            generate(&DataGenConfig::new(20, 40, 4, rng.random())).expect("valid desk instance")
        } else {
            let n = rng.random_range(1..=8);
            let workers = rng.random_range(1..=3);
            let rows = rng.random_range(1..=4);
            random_instance(rng, n, workers, rows)
        };
        match relative_smoothness_margin(&p, geom.as_ref(), rng, pairs) {
            Ok(v) => worst = worst.max(v),
            Err(e) => return CheckResult::errored(fam, name, &e),
        }
        samples += pairs;
    }
    CheckResult::measured(fam, name, samples, worst, 1e-9)
}

/// Largest `f(y) - f(x) - <∇f(x), y-x> - L D_h(y,x)` over sampled interior pairs.
pub fn relative_smoothness_margin<R: Rng>(p: &CompositeProblem, geom: &dyn Geometry, rng: &mut R, pairs: usize) -> Result<f64> {
    let l = p.smoothness_constant();
    let n = p.dim();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let x = interior_point(rng, n, 1.5);
        let y = if rng.random_bool(0.5) {
            interior_point(rng, n, 1.5)
        } else {
            x.iter().map(|v| v * rng.random_range(-0.1f64..0.1).exp()).collect()
        };
        let dh = geom.divergence(&y, &x)?;
        let mut check = |fy: f64, fx: f64, g: &[f64]| {
            let d: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            worst = worst.max(fy - fx - dot(g, &d) - l * dh);
        };
        for i in 0..p.workers() {
            check(p.local_loss(i, &y)?, p.local_loss(i, &x)?, &p.local_gradient(i, &x)?);
        }
        check(p.data_loss(&y)?, p.data_loss(&x)?, &p.data_gradient(&x)?);
    }
    Ok(worst)
}

/// Desk-scale instance and its reference solution.
pub fn desk_instance(seed: u64) -> Result<(CompositeProblem, ReferenceSolution)> {
    let p = generate(&DataGenConfig::new(20, 40, 4, seed))?;
    let r = solve_reference(
        &p,
        &GeometryKind::Entropy.build(),
        0.99 / p.smoothness_constant(),
        DEFAULT_TOLERANCE,
    )?;
    Ok((p, r))
}

pub const DESK_FACTORS: [f64; 4] = [1.0, 1.0, 5.0, 10.0];

/// Largest increase of `max_{k ∈ epoch} D_h(x*, x^k)` between consecutive epochs.
pub fn epoch_max_increase(
    problem: &CompositeProblem,
    reference: &ReferenceSolution,
    kind: AlgorithmKind,
    multiplier: f64,
    delays: &DelayModel,
    iterations: u64,
    seed: u64,
) -> Result<(f64, u64)> {
    let geom: Arc<dyn Geometry> = GeometryKind::Entropy.build();
    let step = StepConfig::for_problem(problem, geom.clone(), multiplier)?;
    let variant = AlgorithmVariant::new(kind, step);
    let mut config = RunConfig::event_sim(iterations);
    config.seed = seed;
    let mut recorder = TraceRecorder::new(problem, geom, reference);
    let report = runtime::run(&variant, problem, &vec![1.0; problem.dim()], delays, &config, &mut recorder)?;
    let trace = recorder.finish()?;
    Ok((trace.worst_epoch_increase(), report.epochs))
}

fn epoch_checks<R: Rng>(rng: &mut R, multiplier: f64, iterations: u64) -> Vec<CheckResult> {
    let fam = CheckFamily::Epoch;
    let mut out = Vec::new();
    let delays = DelayModel::new(DESK_FACTORS.to_vec());
    for _ in 0..3 {
        let seed: u64 = rng.random_range(0..1_000_000);
        for kind in [AlgorithmKind::Dave, AlgorithmKind::Sync] {
            let name = format!("{kind} epoch maxima, instance {seed}");
            let res =
                desk_instance(seed).and_then(|(p, r)| epoch_max_increase(&p, &r, kind, multiplier, &delays, iterations, seed));
            out.push(match res {
                Ok((inc, epochs)) => CheckResult::measured(fam, name, epochs as usize, inc, 1e-7),
                Err(e) => CheckResult::errored(fam, name, &e),
            });
        }
    }
    out
}

/// Largest violation, over an event-driven delay-tolerant run, of
/// `D(x*, x^k) ≤ (1/M)Σ D(x*, x^{k-D_i}) - (1-γL)/M Σ D(x^k, x^{k-D_i}) - γ(F(x^k) - F*)`.
pub fn descent_violation(
    problem: &CompositeProblem,
    reference: &ReferenceSolution,
    multiplier: f64,
    delays: &DelayModel,
    iterations: u64,
    seed: u64,
) -> Result<f64> {
    let geom = GeometryKind::Entropy.build();
    let step = StepConfig::for_problem(problem, geom.clone(), multiplier)?;
    let gamma = step.gamma;
    let l = problem.smoothness_constant();
    let variant = AlgorithmVariant::new(AlgorithmKind::Dave, step);
    let x0 = vec![1.0; problem.dim()];
    let mut sim = EventSim::new(&variant, problem, &x0, delays, seed, false, MasterOptions::default())?;
    let mut iterates = vec![x0];
    let m = problem.workers() as f64;
    let x_star = &reference.x_star;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..iterations {
        if sim.simulate_step()?.is_none() {
            break;
        }
        let x = sim.master().x().to_vec();
        let mut rhs = -gamma * (problem.full_objective(&x)? - reference.f_star);
        for i in 0..problem.workers() {
            let src = &iterates[sim.master().ledger().source_iteration(i).max(0) as usize];
            rhs += geom.divergence(x_star, src)? / m - (1.0 - gamma * l) * geom.divergence(&x, src)? / m;
        }
        worst = worst.max(geom.divergence(x_star, &x)? - rhs);
        iterates.push(x);
    }
    Ok(worst)
}

fn descent_check<R: Rng>(rng: &mut R, multiplier: f64, iterations: u64) -> CheckResult {
    let fam = CheckFamily::Descent;
    let seed: u64 = rng.random_range(0..1_000_000);
    let name = format!("per-iteration descent, instance {seed}");
    let delays = DelayModel::new(DESK_FACTORS.to_vec());
    match desk_instance(seed).and_then(|(p, r)| descent_violation(&p, &r, multiplier, &delays, iterations, seed)) {
        Ok(v) => CheckResult::measured(fam, name, iterations as usize, v, 1e-8),
        Err(e) => CheckResult::errored(fam, name, &e),
    }
}

/// Audit-mode runs: the master checks `‖ū - (1/M)Σ u_i‖∞` after every update
/// and fails the run past the tolerance.
pub fn audit_run(
    problem: &CompositeProblem,
    kind: AlgorithmKind,
    delays: &DelayModel,
    iterations: u64,
    seed: u64,
) -> Result<f64> {
    let step = StepConfig::for_problem(problem, GeometryKind::Entropy.build(), THEORY_MULTIPLIER)?;
    let variant = AlgorithmVariant::new(kind, step);
    let mut config = RunConfig::event_sim(iterations);
    config.seed = seed;
    config.master.audit = true;
    let report = runtime::run(
        &variant,
        problem,
        &vec![1.0; problem.dim()],
        delays,
        &config,
        &mut runtime::NoObserver,
    )?;
    Ok(report.max_audit_residual)
}

fn audit_checks<R: Rng>(rng: &mut R, iterations: u64) -> Vec<CheckResult> {
    let fam = CheckFamily::Audit;
    let seed: u64 = rng.random_range(0..1_000_000);
    let mut out = Vec::new();
    let p = match generate(&DataGenConfig::new(20, 40, 4, seed)) {
        Ok(p) => p,
        Err(e) => return vec![CheckResult::errored(fam, "instance", &e)],
    };
    let mut delays = DelayModel::new(DESK_FACTORS.to_vec());
    delays.base_time = runtime::TimeLaw::Exponential { mean: 1.0 };
    for kind in [AlgorithmKind::Dave, AlgorithmKind::Piag] {
        let name = format!("{kind} aggregate drift");
        out.push(match audit_run(&p, kind, &delays, iterations, seed) {
            Ok(r) => CheckResult::measured(fam, name, iterations as usize, r, AUDIT_TOLERANCE),
            Err(e) => CheckResult::errored(fam, name, &e),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_names() {
        for f in CheckFamily::ALL {
            assert_eq!(f.label().parse::<CheckFamily>().unwrap(), f);
        }
        assert!("everything".parse::<CheckFamily>().is_err());
    }

    #[test]
    fn sign_flipped_gradient_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let flipped = |p: &CompositeProblem, i: usize, x: &[f64]| -> Result<Vec<f64>> {
            Ok(p.local_gradient(i, x)?.into_iter().map(|g| -g).collect())
        };
        assert!(!gradient_check(&mut rng, 10, &flipped).passed);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(gradient_check(&mut rng, 10, &|p, i, x| p.local_gradient(i, x)).passed);
    }

    #[test]
    fn only_runs_one_family() {
        let report = property_suite(&SuiteOptions {
            only: Some(CheckFamily::Prox),
            ..SuiteOptions::default()
        });
        assert!(report.results.iter().all(|r| r.family == CheckFamily::Prox));
        assert!(report.passed(), "{}", report.table());
    }

    #[test]
    fn contraction_holds_beyond_one_over_l() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let r = contraction_check(&mut rng, 60, Some(2.0));
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn nan_statistic_fails() {
        assert!(!CheckResult::measured(CheckFamily::Geometry, "x", 1, f64::NAN, 1.0).passed);
    }
}
