//! High-accuracy minimizer of `F` over the nonnegative orthant.
//!
//! A plain synchronous run stalls far from machine precision on these
//! problems, so the minimizer comes from a projected Newton method with an
//! Armijo search along the projection arc. The result is then certified as a
//! fixed point of one synchronous Bregman step: `D_h(T(x*), x*) ≤ tol`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::problem::CompositeProblem;
use crate::step::StepConfig;

pub const DEFAULT_TOLERANCE: f64 = 1e-14;

const MAX_NEWTON_ITERATIONS: usize = 500;
const RESIDUAL_TARGET: f64 = 1e-13;
/// Residual below which a stalled search counts as converged to rounding level.
const RESIDUAL_FLOOR: f64 = 1e-9;
const ARMIJO: f64 = 1e-4;
/// Value zero coordinates are lifted to before taking an entropy step.
const INTERIOR_LIFT: f64 = 1e-200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveMeta {
    pub iterations: usize,
    /// `‖x - P(x - ∇F(x))‖∞`.
    pub residual: f64,
    /// `D_h(T(x*), x*)` for one synchronous step.
    pub certificate: f64,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub meta: SolveMeta,
}

impl ReferenceSolution {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn natural_residual(x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xj, &gj)| (xj - (xj - gj).max(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Hessian of the smooth part restricted to `free`.
fn reduced_hessian(problem: &CompositeProblem, x: &[f64], free: &[usize]) -> DMatrix<f64> {
    let a = problem.matrix();
    let scale = 1.0 / problem.workers() as f64;
    let mut h = DMatrix::zeros(free.len(), free.len());
    let mut sub = vec![0.0; free.len()];
    for r in 0..a.rows() {
        let row = a.row(r);
        let t: f64 = row.iter().zip(x).map(|(u, v)| u * v).sum();
        if t <= 0.0 {
            continue;
        }
        for (s, &j) in sub.iter_mut().zip(free) {
            *s = row[j];
        }
        let w = scale / t;
        for q in 0..free.len() {
            let wq = w * sub[q];
            if wq == 0.0 {
                continue;
            }
            for p in q..free.len() {
                h[(p, q)] += wq * sub[p];
            }
        }
    }
    h.fill_upper_triangle_with_lower_triangle();
    h
}

fn newton_direction(h: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let scale = h.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut shift = 0.0;
    for _ in 0..30 {
        let mut shifted = h.clone();
        for j in 0..shifted.nrows() {
            shifted[(j, j)] += shift;
        }
        if let Some(chol) = shifted.cholesky() {
            return Ok(chol.solve(&rhs));
        }
        shift = if shift == 0.0 { 1e-12 * scale } else { shift * 10.0 };
    }
    Err(Error::NoConvergence("reduced Hessian could not be factored".into()))
}

/// Projected Newton on `min F(x) s.t. x ≥ 0`, returning `(x, iterations, residual)`.
fn projected_newton(problem: &CompositeProblem) -> Result<(Vec<f64>, usize, f64)> {
    let n = problem.dim();
    let mut x = vec![1.0; n];
    let mut f = problem.full_objective(&x)?;
    let mut best_residual = f64::INFINITY;
    let mut stalls = 0;
    for it in 0..MAX_NEWTON_ITERATIONS {
        let g = problem.objective_gradient(&x)?;
        let residual = natural_residual(&x, &g);
        if residual <= RESIDUAL_TARGET {
            return Ok((x, it, residual));
        }
        if residual < 0.5 * best_residual {
            best_residual = residual;
            stalls = 0;
        } else {
            stalls += 1;
            if stalls >= 5 && residual <= RESIDUAL_FLOOR {
                return Ok((x, it, residual));
            }
        }

        let eps = residual.min(1e-3);
        let (free, active): (Vec<usize>, Vec<usize>) = (0..n).partition(|&j| !(x[j] <= eps && g[j] > 0.0));
        let mut d = vec![0.0; n];
        if !free.is_empty() {
            let h = reduced_hessian(problem, &x, &free);
            let rhs = DVector::from_iterator(free.len(), free.iter().map(|&j| -g[j]));
            let step = newton_direction(h, rhs)?;
            for (&j, v) in free.iter().zip(step.iter()) {
                d[j] = *v;
            }
        }
        for &j in &active {
            d[j] = -g[j];
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-20 {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xj, dj)| (xj + alpha * dj).max(0.0)).collect();
            // trials where some <a_r, x> vanishes have no gradient
            let ft = problem
                .objective_gradient(&trial)
                .and_then(|_| problem.full_objective(&trial));
            if let Ok(ft) = ft {
                let predicted = ARMIJO
                    * (alpha * free.iter().map(|&j| -g[j] * d[j]).sum::<f64>()
                        + active.iter().map(|&j| g[j] * (x[j] - trial[j])).sum::<f64>());
                // near the solution the predicted decrease drops below rounding in F
                let within_noise = alpha == 1.0 && ft <= f + 1e-13 * f.abs().max(1.0);
                if ft <= f - predicted || within_noise {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, ft)) => {
                x = trial;
                f = ft;
            }
            None if residual <= RESIDUAL_FLOOR => return Ok((x, it, residual)),
            None => {
                return Err(Error::NoConvergence(format!(
                    "line search failed at iteration {it}, residual {residual:e}"
                )))
            }
        }
    }
    let g = problem.objective_gradient(&x)?;
    let residual = natural_residual(&x, &g);
    if residual <= RESIDUAL_FLOOR {
        return Ok((x, MAX_NEWTON_ITERATIONS, residual));
    }
    Err(Error::NoConvergence(format!(
        "{MAX_NEWTON_ITERATIONS} Newton iterations, residual {residual:e}, F = {f}"
    )))
}

/// One synchronous step from `x`, returning `D_h(T(x), x)`.
pub fn fixed_point_gap(problem: &CompositeProblem, step: &StepConfig, x: &[f64]) -> Result<f64> {
    let geometry = step.geometry.as_ref();
    let base: Vec<f64> = if geometry.in_interior(x) {
        x.to_vec()
    } else {
        x.iter().map(|&v| v.max(INTERIOR_LIFT)).collect()
    };
    let grad = problem.data_gradient(&base)?;
    let gh = geometry.gradient(&base)?;
    let scale = step.gamma / problem.workers() as f64;
    let ubar: Vec<f64> = grad.iter().zip(&gh).map(|(g, h)| scale * g - h).collect();
    let next = step.apply(&ubar)?;
    geometry.divergence(&next, &base)
}

/// Minimizer of `F` certified at tolerance `tol` for steps of size `gamma`
/// in `geometry`.
pub fn solve_reference(
    problem: &CompositeProblem,
    geometry: &std::sync::Arc<dyn Geometry>,
    gamma: f64,
    tol: f64,
) -> Result<ReferenceSolution> {
    if !(gamma > 0.0 && gamma * problem.smoothness_constant() < 1.0) {
        return Err(Error::Config(format!(
            "reference stepsize {gamma} must lie in (0, 1/L) with L = {}",
            problem.smoothness_constant()
        )));
    }
    let (x_star, iterations, residual) = projected_newton(problem)?;
    let step = StepConfig::new(gamma, problem.lambda(), geometry.clone())?;
    let certificate = fixed_point_gap(problem, &step, &x_star)?;
    if !(certificate <= tol) {
        return Err(Error::NoConvergence(format!(
            "fixed-point certificate {certificate:e} above {tol:e} (residual {residual:e})"
        )));
    }
    let f_star = problem.full_objective(&x_star)?;
    let active = x_star.iter().filter(|&&v| v == 0.0).count();
    Ok(ReferenceSolution {
        x_star,
        f_star,
        meta: SolveMeta {
            iterations,
            residual,
            certificate,
            active,
        },
    })
}
