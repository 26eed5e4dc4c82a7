//! Bernstein diffusions on random space-time domains: obstacle solvers for
//! the forward and backward stopping problems, Schrödinger systems,
//! Monte Carlo simulation and the law of the optimal stopping time.

pub mod acceptance;
pub mod analytic;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod hjb;
pub mod io;
pub mod schrodinger;
pub mod simulate;
pub mod stopping;

pub use error::{Error, Result};
