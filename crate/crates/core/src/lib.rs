//! Monte Carlo machinery for propagation of chaos in mean-field SDEs:
//! particle systems and their McKean-Vlasov limits, directional and
//! Malliavin derivative flows, Bismut-type derivative estimators, and a
//! harness that fits empirical convergence rates against the theory.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Stepping kernels take the full set of coefficients, grid and buffers.
#![allow(clippy::too_many_arguments)]

pub mod error;
pub mod linalg;
pub mod measures;
pub mod models;
pub mod noise;
pub mod particle_sim;
pub mod derivative_sim;
pub mod coupled;
pub mod bismut;
pub mod harness;

pub use error::{Error, Result};
