//! Bregman reference functions (Legendre regularizers) and their divergences.
//!
//! Every geometry here is separable, `h(x) = Σ φ(x_j)`, which is what lets the
//! proximal step be taken coordinate by coordinate. Divergences follow the
//! usual convention `D_h(x, y) = h(x) - h(y) - <∇h(y), x - y>`: the first
//! argument may sit on the boundary of `dom h`, the second must be interior.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    /// Boltzmann–Shannon entropy `Σ x_j log x_j` on the nonnegative orthant.
    Entropy,
    /// `½‖x‖²` on the whole space.
    Euclidean,
}

impl GeometryKind {
    pub fn name(self) -> &'static str {
        match self {
            GeometryKind::Entropy => "entropy",
            GeometryKind::Euclidean => "euclidean",
        }
    }

    pub fn build(self) -> Arc<dyn Geometry> {
        match self {
            GeometryKind::Entropy => Arc::new(Entropy),
            GeometryKind::Euclidean => Arc::new(Euclidean),
        }
    }
}

impl fmt::Display for GeometryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeometryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(GeometryKind::Entropy),
            "euclidean" => Ok(GeometryKind::Euclidean),
            other => Err(Error::Config(format!(
                "unknown geometry {other:?} (expected \"entropy\" or \"euclidean\")"
            ))),
        }
    }
}

/// A separable Legendre function `h` together with the operations the solver needs.
pub trait Geometry: fmt::Debug + Send + Sync {
    fn kind(&self) -> GeometryKind;

    fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Membership in `dom h`.
    fn in_domain(&self, x: &[f64]) -> bool;

    /// Membership in `int dom h`. No tolerance is applied.
    fn in_interior(&self, x: &[f64]) -> bool;

    fn value(&self, x: &[f64]) -> Result<f64>;

    /// `∇h(x)`; `x` must be interior.
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// `D_h(x, y)` for `x ∈ dom h`, `y ∈ int dom h`.
    fn divergence(&self, x: &[f64], y: &[f64]) -> Result<f64>;

    /// Coordinate-wise `argmin_{y ≥ 0} φ(y) + shift_j · y`.
    ///
    /// This is the whole Bregman proximal map once the linear part of the
    /// regularizer has been folded into `shift`. `exponent_cap` bounds the
    /// magnitude of any exponent evaluated on the way.
    fn orthant_argmin(&self, shift: &[f64], exponent_cap: f64) -> Result<Vec<f64>>;
}

fn check_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::domain(format!("dimension mismatch: {} vs {}", x.len(), y.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Entropy;

impl Entropy {
    fn check_domain(x: &[f64]) -> Result<()> {
        match x.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            Some(j) => Err(Error::domain(format!(
                "entropy: coordinate {j} = {} is outside the nonnegative orthant",
                x[j]
            ))),
            None => Ok(()),
        }
    }

    fn check_interior(x: &[f64]) -> Result<()> {
        match x.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            Some(j) => Err(Error::domain(format!(
                "entropy: coordinate {j} = {} is not strictly positive",
                x[j]
            ))),
            None => Ok(()),
        }
    }
}

impl Geometry for Entropy {
    fn kind(&self) -> GeometryKind {
        GeometryKind::Entropy
    }

    fn in_domain(&self, x: &[f64]) -> bool {
        Self::check_domain(x).is_ok()
    }

    fn in_interior(&self, x: &[f64]) -> bool {
        Self::check_interior(x).is_ok()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Self::check_domain(x)?;
        // 0·log 0 is taken as 0 (continuous extension).
        Ok(x.iter().map(|&v| if v == 0.0 { 0.0 } else { v * v.ln() }).sum())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Self::check_interior(x)?;
        Ok(x.iter().map(|&v| 1.0 + v.ln()).collect())
    }

    fn divergence(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_len(x, y)?;
        Self::check_domain(x)?;
        Self::check_interior(y)?;
        Ok(x.iter()
            .zip(y)
            .map(|(&a, &b)| if a == 0.0 { b } else { a * (a / b).ln() - a + b })
            .sum())
    }

    fn orthant_argmin(&self, shift: &[f64], exponent_cap: f64) -> Result<Vec<f64>> {
        // Stationarity: log y + 1 + c = 0.
        shift
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let exponent = -(1.0 + c);
                if !(exponent.abs() <= exponent_cap) {
                    return Err(Error::OverflowGuard {
                        coordinate: j,
                        exponent,
                        cap: exponent_cap,
                    });
                }
                Ok(exponent.exp())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl Euclidean {
    fn check_finite(x: &[f64]) -> Result<()> {
        match x.iter().position(|v| !v.is_finite()) {
            Some(j) => Err(Error::domain(format!("euclidean: coordinate {j} is not finite"))),
            None => Ok(()),
        }
    }
}

impl Geometry for Euclidean {
    fn kind(&self) -> GeometryKind {
        GeometryKind::Euclidean
    }

    fn in_domain(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite())
    }

    fn in_interior(&self, x: &[f64]) -> bool {
        self.in_domain(x)
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Self::check_finite(x)?;
        Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Self::check_finite(x)?;
        Ok(x.to_vec())
    }

    fn divergence(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_len(x, y)?;
        Self::check_finite(x)?;
        Self::check_finite(y)?;
        Ok(0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }

    fn orthant_argmin(&self, shift: &[f64], _exponent_cap: f64) -> Result<Vec<f64>> {
        Self::check_finite(shift)?;
        Ok(shift.iter().map(|&c| (-c).max(0.0)).collect())
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::E;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn entropy_values() {
        let h = Entropy;
        assert_eq!(h.value(&[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(h.value(&[0.0, 1.0]).unwrap(), 0.0);
        let expected = 2.0 * 2f64.ln() + 3.0 * 3f64.ln();
        assert!(close(h.value(&[2.0, 3.0]).unwrap(), expected, 1e-15));
        assert!(close(expected, 4.682131227, 1e-9));
    }

    #[test]
    fn entropy_value_rejects_negative() {
        assert!(matches!(Entropy.value(&[1.0, -1e-300]), Err(Error::Domain(_))));
        assert!(matches!(Entropy.value(&[f64::NAN]), Err(Error::Domain(_))));
    }

    #[test]
    fn gradients() {
        assert_eq!(Entropy.gradient(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        let g = Entropy.gradient(&[E, E]).unwrap();
        assert!(close(g[0], 2.0, 1e-15) && close(g[1], 2.0, 1e-15));
        assert_eq!(Euclidean.gradient(&[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);
    }

    #[test]
    fn entropy_gradient_requires_interior() {
        assert!(Entropy.gradient(&[1.0, 0.0]).is_err());
        assert!(Entropy.gradient(&[-1.0]).is_err());
    }

    #[test]
    fn divergences() {
        assert_eq!(Entropy.divergence(&[0.5, 2.5], &[0.5, 2.5]).unwrap(), 0.0);
        let d = Entropy.divergence(&[1.0, 1.0], &[E, 1.0]).unwrap();
        assert!(close(d, E - 2.0, 1e-14));
        assert_eq!(Euclidean.divergence(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        // boundary first argument is allowed, boundary second is not
        assert!(close(Entropy.divergence(&[0.0, 1.0], &[2.0, 1.0]).unwrap(), 2.0, 1e-15));
        assert!(Entropy.divergence(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn divergence_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..5.0)).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..5.0)).collect();
            for geom in [GeometryKind::Entropy.build(), GeometryKind::Euclidean.build()] {
                let gy = geom.gradient(&y).unwrap();
                let def = geom.value(&x).unwrap()
                    - geom.value(&y).unwrap()
                    - gy.iter().zip(x.iter().zip(&y)).map(|(g, (a, b))| g * (a - b)).sum::<f64>();
                assert!(close(geom.divergence(&x, &y).unwrap(), def, 1e-10));
            }
        }
    }

    #[test]
    fn orthant_argmin_closed_forms() {
        let x = Entropy.orthant_argmin(&[-2.0 + 1.0], 700.0).unwrap();
        assert!(close(x[0], 1.0, 1e-15));
        assert_eq!(Euclidean.orthant_argmin(&[-3.0, 2.0], 700.0).unwrap(), vec![3.0, 0.0]);
        assert!(matches!(
            Entropy.orthant_argmin(&[0.0, 800.0], 700.0),
            Err(Error::OverflowGuard { coordinate: 1, .. })
        ));
        assert!(Entropy.orthant_argmin(&[f64::NAN], 700.0).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("entropy".parse::<GeometryKind>().unwrap(), GeometryKind::Entropy);
        assert_eq!("euclidean".parse::<GeometryKind>().unwrap(), GeometryKind::Euclidean);
        assert!("hellinger".parse::<GeometryKind>().is_err());
        assert_eq!(GeometryKind::Entropy.build().name(), "entropy");
    }
}
