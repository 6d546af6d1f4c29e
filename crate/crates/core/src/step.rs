//! The Bregman proximal map applied by the master:
//! `T(ū) = argmin_{x ≥ 0} h(x) + γλ‖x‖₁ + <ū, x>`.
//!
//! On the nonnegative orthant the ℓ1 term is linear, so the map reduces to the
//! geometry's coordinate-wise argmin with shift `ū_j + γλ`. For the entropy this
//! is `x_j = exp(-(1 + γλ + ū_j))`; for the Euclidean geometry it is the
//! nonnegative soft-threshold `max(0, -ū_j - γλ)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::problem::CompositeProblem;

pub const DEFAULT_EXPONENT_CAP: f64 = 700.0;

/// Default multiplier on `1/L`.
pub const THEORY_MULTIPLIER: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct StepConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub geometry: Arc<dyn Geometry>,
    pub exponent_cap: f64,
}

impl StepConfig {
    pub fn new(gamma: f64, lambda: f64, geometry: Arc<dyn Geometry>) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("stepsize gamma = {gamma} must be positive")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {lambda} must be nonnegative")));
        }
        Ok(StepConfig {
            gamma,
            lambda,
            geometry,
            exponent_cap: DEFAULT_EXPONENT_CAP,
        })
    }

    /// `γ = multiplier / L` with λ taken from the problem.
    pub fn for_problem(problem: &CompositeProblem, geometry: Arc<dyn Geometry>, multiplier: f64) -> Result<Self> {
        Self::new(multiplier / problem.smoothness_constant(), problem.lambda(), geometry)
    }

    /// `γ < 1/L`, the range in which the synchronous and delay-tolerant methods converge.
    pub fn is_convergence_grade(&self, smoothness: f64) -> bool {
        self.gamma * smoothness < 1.0
    }

    fn shift(&self, ubar: &[f64]) -> Result<Vec<f64>> {
        if let Some(j) = ubar.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("aggregate coordinate {j} is not finite")));
        }
        let gl = self.gamma * self.lambda;
        Ok(ubar.iter().map(|u| u + gl).collect())
    }

    /// Closed-form proximal point.
    pub fn apply(&self, ubar: &[f64]) -> Result<Vec<f64>> {
        let shift = self.shift(ubar)?;
        self.geometry.orthant_argmin(&shift, self.exponent_cap)
    }

    /// The same map computed by bracketed bisection on the derivative of the
    /// one-dimensional objective `φ(y) + (γλ + ū_j) y`, using only `∇h`.
    pub fn apply_oracle(&self, ubar: &[f64]) -> Result<Vec<f64>> {
        self.shift(ubar)?
            .into_iter()
            .enumerate()
            .map(|(j, c)| {
                coordinate_minimizer(self.geometry.as_ref(), c).map_err(|e| match e {
                    Error::NoConvergence(msg) => Error::NoConvergence(format!("coordinate {j}: {msg}")),
                    other => other,
                })
            })
            .collect()
    }
}

const ORACLE_MAX_ITER: usize = 5000;
const ORACLE_ABS_TOL: f64 = 1e-12;

fn coordinate_minimizer(geom: &dyn Geometry, shift: f64) -> Result<f64> {
    let slope = |y: f64| -> Result<f64> { Ok(geom.gradient(&[y])?[0] + shift) };

    if geom.in_interior(&[0.0]) && slope(0.0)? >= 0.0 {
        return Ok(0.0);
    }

    let mut hi = 1.0_f64;
    let mut iter = 0;
    while slope(hi)? <= 0.0 {
        hi *= 2.0;
        iter += 1;
        if !hi.is_finite() || iter > ORACLE_MAX_ITER {
            return Err(Error::NoConvergence("no upper bracket".into()));
        }
    }
    let mut lo = if geom.in_interior(&[0.0]) { 0.0 } else { 0.5 * hi };
    while lo > 0.0 && slope(lo)? >= 0.0 {
        lo *= 0.5;
        iter += 1;
        if lo == 0.0 || iter > ORACLE_MAX_ITER {
            return Err(Error::NoConvergence("no lower bracket".into()));
        }
    }

    for _ in 0..ORACLE_MAX_ITER {
        if hi - lo <= ORACLE_ABS_TOL * hi.min(1.0) {
            return Ok(0.5 * (lo + hi));
        }
        // geometric midpoints while the bracket spans orders of magnitude
        let mid = if lo > 0.0 && hi > 4.0 * lo {
            lo.sqrt() * hi.sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if mid <= lo || mid >= hi {
            return Ok(mid.clamp(lo, hi));
        }
        if slope(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoConvergence(format!(
        "bisection did not reach tolerance, bracket [{lo}, {hi}]"
    )))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::GeometryKind;
    use crate::problem::DenseMatrix;

    fn entropy_step(gamma: f64, lambda: f64) -> StepConfig {
        StepConfig::new(gamma, lambda, GeometryKind::Entropy.build()).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn identity_at_zero_gradient() {
        let step = entropy_step(0.3, 0.0);
        let x0 = [2.0, 5.0];
        let ubar: Vec<f64> = entropy_grad(&x0).iter().map(|g| -g).collect();
        let x = step.apply(&ubar).unwrap();
        assert!(rel(x[0], 2.0) <= 1e-12 && rel(x[1], 5.0) <= 1e-12);
    }

    fn entropy_grad(x: &[f64]) -> Vec<f64> {
        GeometryKind::Entropy.build().gradient(x).unwrap()
    }

    #[test]
    fn single_worker_multiplicative_update() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.2, 2.0], vec![0.7, 0.7]]).unwrap();
        let p = CompositeProblem::new(a.clone(), vec![1.0, 2.0, 0.5], 0.0, 1).unwrap();
        let gamma = 0.9 / p.smoothness_constant();
        let step = entropy_step(gamma, 0.0);
        let x = [0.8, 1.3];
        let grad = p.local_gradient(0, &x).unwrap();
        let ubar: Vec<f64> = grad.iter().zip(entropy_grad(&x)).map(|(g, h)| gamma * g - h).collect();
        let got = step.apply(&ubar).unwrap();
        for j in 0..2 {
            let mut s = 0.0;
            for i in 0..3 {
                let t: f64 = a.row(i).iter().zip(&x).map(|(u, v)| u * v).sum();
                s += a.row(i)[j] * (t / p.observations()[i]).ln();
            }
            let expected = x[j] * (-gamma * s).exp();
            assert!(rel(got[j], expected) < 1e-13);
        }
    }

    #[test]
    fn shifted_example() {
        // γλ = 1, ū_j = −2 ⇒ exp(−(1 + 1 − 2)) = 1
        let step = entropy_step(0.5, 2.0);
        assert!(rel(step.apply(&[-2.0]).unwrap()[0], 1.0) < 1e-15);
    }

    #[test]
    fn oracle_examples() {
        let step = entropy_step(1.0, 0.0);
        assert!((step.apply_oracle(&[-1.0]).unwrap()[0] - 1.0).abs() < 1e-12);
        let far = step.apply_oracle(&[600.0]).unwrap()[0];
        assert!(far > 0.0 && far < 1e-200);
        assert!(rel(far, (-601.0f64).exp()) < 1e-8);
    }

    #[test]
    fn oracle_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let gamma = rng.random_range(0.01..2.0);
            let lambda = rng.random_range(0.0..1.0);
            let ubar: Vec<f64> = (0..10).map(|_| rng.random_range(-8.0..8.0)).collect();
            for kind in [GeometryKind::Entropy, GeometryKind::Euclidean] {
                let step = StepConfig::new(gamma, lambda, kind.build()).unwrap();
                let a = step.apply(&ubar).unwrap();
                let o = step.apply_oracle(&ubar).unwrap();
                for (x, y) in a.iter().zip(&o) {
                    assert!((x - y).abs() <= 1e-8 * (1.0 + y.abs()), "{kind}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn overflow_guard() {
        let step = entropy_step(1.0, 0.0);
        assert!(matches!(step.apply(&[-800.0]), Err(Error::OverflowGuard { .. })));
        assert!(matches!(step.apply(&[f64::INFINITY]), Err(Error::Domain(_))));
    }

    #[test]
    fn interior_preserved_for_moderate_aggregates() {
        let step = entropy_step(0.1, 0.3);
        let x = step.apply(&[698.0, -300.0, 0.0]).unwrap();
        assert!(x.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = GeometryKind::Entropy.build();
        assert!(StepConfig::new(0.0, 0.0, g.clone()).is_err());
        assert!(StepConfig::new(1.0, -0.1, g).is_err());
    }
}
