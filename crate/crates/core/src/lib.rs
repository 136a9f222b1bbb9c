//! Approximation algorithms for maximizing Nash social welfare when
//! indivisible items are allocated to agents with separable
//! piecewise-linear concave utilities.
//!
//! Two pipelines are provided:
//!
//! * [`market`] computes a spending-restricted equilibrium with a scaling
//!   max-flow algorithm and [`rounding`] turns it into an integral allocation
//!   within a factor 2 of optimal.
//! * [`stable`] solves a convex relaxation built from two real stable
//!   polynomials and rounds it by independent sampling, losing at most a
//!   factor `e^2` in expectation.
//!
//! [`oracle`] holds brute-force solvers used as ground truth.

pub mod error;
pub mod generate;
pub mod instance;
pub mod io;
pub mod market;
pub mod oracle;
pub mod pipeline;
pub mod rounding;
pub mod stable;

pub use error::{NswError, Result};
pub use instance::{agent_utility, canonicalize, nsw, Allocation, Instance, NswValue, Triplet, EPS_NUM};
