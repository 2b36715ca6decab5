//! Command-line front end for certifying and validating incremental gain
//! bounds of polynomial systems with delay and norm-bounded uncertainty.

pub mod commands;
pub mod model;
pub mod selftest;
