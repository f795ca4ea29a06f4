//! Forward simulation, estimate monitoring and all-at-once parameter
//! identification for 1D thermo-piezoelectric Kelvin-Voigt media.

// `!(x > 0.0)` is used on purpose so that NaN fails positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod grid;
pub mod inverse;
pub mod materials;
pub mod observation;
pub mod solver;
