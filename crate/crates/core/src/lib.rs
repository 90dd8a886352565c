//! Numerical library for infinite-horizon stochastic Volterra integral equations.

pub mod error;
pub mod ext_real;
pub mod kernel;
mod quad;
pub mod stochastic;
pub mod svie;
pub mod bsvie;
pub mod linear;
pub mod control;
pub mod io;
pub mod run;

pub use error::{Error, Result};
pub use kernel::Kernel;
