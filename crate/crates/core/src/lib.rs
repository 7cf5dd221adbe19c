//! Online control of partially observed linear dynamical systems with
//! spectral filtering, plus GRC and LQG baselines and an experiment harness.

pub mod baselines;
pub mod controller;
pub mod dsc;
pub mod error;
pub mod harness;
pub mod lds;
pub mod memoryless;
pub mod signals;
pub mod spectral;

pub use error::{Error, Result};
