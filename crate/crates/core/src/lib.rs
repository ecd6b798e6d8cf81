//! Test-time adaptive point cloud registration.

pub mod autodiff;
pub mod auxiliary;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod meta;
pub mod networks;
pub mod registration;
pub mod rng;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
