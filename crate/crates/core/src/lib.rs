//! Two-stage orthogonal estimation of the treatment effect in the partially
//! linear model `Y = theta0 T + f0(X) + eps`, `T = g0(X) + eta`.
//!
//! The crate provides the data-generating process ([`dgp`]), a Lasso first
//! stage ([`lasso`]), first- and second-order orthogonal moments
//! ([`moments`]), sample-splitting and cross-fitting Z-estimators
//! ([`estimator`]), numerical orthogonality checks ([`ortho_check`]) and a
//! Monte Carlo harness ([`harness`]).

// Parameter checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dgp;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod lasso;
pub mod moments;
pub mod ortho_check;
pub mod rng;

pub use error::{Error, Result};
pub use rng::SimRng;
