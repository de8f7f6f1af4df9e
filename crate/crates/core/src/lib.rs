//! Analytic and numerical tools for spherical mixed p-spin glasses.
//!
//! The Hamiltonian is a centered Gaussian field on the sphere of radius
//! `sqrt N` with covariance `E H(x) H(y) = N xi(<x,y>/N)`.

pub mod conditioning;
pub mod error;
pub mod franz_parisi;
pub mod landscape;
pub mod mc;
pub mod mixture;
mod optim;
mod profile;
pub mod rng;
pub mod rsb;

pub use error::{Error, Result};
pub use mixture::Mixture;
pub use rsb::{OrderParameter, SolverConfig, ZeroTempOrder};
