//! flowlab: invertible flow layers, constructive diffeomorphism factorizations,
//! Knothe–Rosenblatt transport on grids, and integral-probability-metric
//! certificates, all at desk scale.
//!
//! The crate is organized as:
//! - [`flows`]: coupling / sigmoidal / sum-of-squares / permutation / affine
//!   layers, their composition into invertible networks, and realization of
//!   affine maps by single-coordinate layers and permutations.
//! - [`mlp`]: a minimal dense MLP with backprop, the concrete conditioner class.
//! - [`node`]: RK4 flow endpoints of Lipschitz vector fields, analytic flow
//!   examples, and the Grönwall error certificate.
//! - [`decompose`]: near-identity checks, trailing-minor tests, flow splitting,
//!   and triangular factorization into single-coordinate maps.
//! - [`transport`]: grid measures, Knothe–Rosenblatt maps, mollification,
//!   pushforwards.
//! - [`metrics`]: TV / W₁ / Dudley / MMD on grid measures plus inequality
//!   certificates.
//! - [`sobolev`]: grid-based local Sobolev seminorms (r ≤ 1, p ∈ {1,2,∞}).
//! - [`harness`]: reproducible experiments and their JSON reports (see the
//!   `flowlab` binary).

pub mod decompose;
pub mod error;
pub mod field;
pub mod flows;
pub mod harness;
pub mod metrics;
pub mod mlp;
pub mod node;
pub mod roots;
pub mod sobolev;
pub mod transport;

pub use error::{Error, Result};
pub use field::ScalarField;

/// A point of ℝ^d. All public entry points validate finiteness and d ≥ 1.
pub type Point = Vec<f64>;

pub(crate) fn check_point(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::InvalidInput("point must have dimension >= 1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}
