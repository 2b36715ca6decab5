//! Certification of differential / incremental L2-gain bounds for uncertain
//! polynomial systems in feedback with uncertainties described by
//! differential integral quadratic constraints (δ-IQCs).
//!
//! The pipeline runs bottom-up through the modules:
//!
//! * [`poly`]: multivariate polynomials, Jacobians, polynomial matrices.
//! * [`linalg`]: Schur forms, Riccati equations, spectral factors, H∞ norms.
//! * [`lti`]: state-space realizations and J-spectral factorization.
//! * [`iqc`]: the multiplier library and admissibility checks.
//! * [`diffsys`]: differential dynamics and the filter-extended system.
//! * [`sosp`]: sum-of-squares compilation of polynomial matrix inequalities.
//! * [`conic`]: the semidefinite programming solver.
//! * [`analysis`]: gain minimization, certificates and their verification.
//! * [`sim`]: time-domain validation of issued certificates.

pub mod analysis;
pub mod conic;
pub mod diffsys;
pub mod iqc;
pub mod linalg;
pub mod lti;
pub mod poly;
pub mod sim;
pub mod sosp;

mod error;

pub use error::{Error, Result};

