//! Joint active-device detection and channel estimation for wideband
//! massive access with sparse, low-rank delay-angular channels.
//!
//! The crate is organised bottom-up: [`channel_model`] draws scenes,
//! [`measurement`] maps them to received pilots, [`manifold`] and
//! [`solver`] implement the multi-rank aware Riemannian solvers,
//! [`baselines`] holds FISTA and block OMP, [`metrics`] scores trials,
//! [`analysis`] evaluates measurement bounds and empirical RIP constants,
//! and [`harness`] runs Monte-Carlo sweeps.

pub mod analysis;
pub mod baselines;
pub mod channel_model;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod manifold;
pub mod measurement;
pub mod metrics;
pub mod solver;

pub use error::{Error, Result};
pub use linalg::{CMat, CVec};
