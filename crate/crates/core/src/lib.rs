//! Subnetwork data parallelism simulator.
//!
//! `N` simulated workers share one parameter vector θ. Worker `i` trains the
//! fixed subnetwork `m_i ⊙ θ`; gradients are averaged per parameter over the
//! workers whose mask contains it, and one optimizer step updates θ.

pub mod autograd;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod model;

pub use error::{Error, ErrorCategory, Result};
