//! Adjoint-based inexact SQP for optimal control with block-wise two-sided
//! rank-one (TR1) Jacobian updates, a lifted collocation variant that keeps
//! its factorizations current with rank-one updates, and a real-time
//! iteration NMPC harness.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod integrator;
pub mod lifted;
pub mod model;
pub mod qp;
pub mod rti;
pub mod sqp;

pub use error::{Error, Result};
