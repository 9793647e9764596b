//! Data-based distributionally robust stochastic optimal power flow.
//!
//! Network models and power-flow oracles, device dynamics with affine
//! policies, Wasserstein-ambiguous CVaR reformulations, assembly of the
//! resulting quadratic programs, an interior-point QP solver and a
//! receding-horizon simulation harness.

pub mod affine;
pub mod case;
pub mod dataset;
pub mod devices;
pub mod dro;
pub mod error;
pub mod linearization;
pub mod mpc;
pub mod network;
pub mod opf;
pub mod qp;
pub mod scenario;
pub mod sparse;

pub use error::{Error, Result};
