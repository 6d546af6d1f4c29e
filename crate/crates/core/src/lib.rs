//! Delay-tolerant asynchronous Bregman proximal-gradient methods.
//!
//! A master holds the aggregate `ū = (1/M) Σ u_i` of worker contributions
//! `u_i = γ∇f_i(x_i) - ∇h(x_i)` and answers every incoming adjustment with the
//! Bregman proximal point `argmin_x h(x) + γ g(x) + <ū, x>`. Contributions are
//! anchored at the point where their gradient was computed, so the stepsize
//! does not depend on how stale they are.
//!
//! Modules, bottom-up:
//! - [`geometry`]: reference functions `h` and divergences `D_h`.
//! - [`problem`]: the KL regression objective, data generation and disk format.
//! - [`step`]: the closed-form proximal map and its numeric oracle.
//! - [`protocol`]: master/worker state, delay and epoch bookkeeping.
//! - [`algorithms`]: synchronous, Bregman-PIAG and delay-tolerant strategies.
//! - [`runtime`]: discrete-event and threaded backends.
//! - [`harness`]: reference solutions, metrics, traces and property checks.
//! - [`config`]: JSON experiment configuration and drivers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod config;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod problem;
pub mod protocol;
pub mod runtime;
pub mod step;

pub use algorithms::{AlgorithmKind, AlgorithmVariant};
pub use error::{Error, Result};
pub use geometry::{Entropy, Euclidean, Geometry, GeometryKind};
pub use problem::{CompositeProblem, DataGenConfig, DenseMatrix};
pub use step::StepConfig;
