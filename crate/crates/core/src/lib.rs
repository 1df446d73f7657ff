//! Deterministic simulator for federated learning of a VQ-based semantic
//! communication model with server-side feature reconstruction.

pub mod analysis;
pub mod autodiff;
pub mod channel;
pub mod compression;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
