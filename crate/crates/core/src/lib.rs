//! Checkpoint arithmetic toolkit.
//!
//! Extracts task vectors as parameter differences between two donor
//! checkpoints, transfers them onto compatible targets with scaling and
//! masking, interpolates between checkpoints, checks linear-mode-connectivity
//! barriers on analytic losses, and generates seeded perturbations of
//! math word problems.

pub mod compat;
pub mod digest;
pub mod error;
pub mod lmclab;
pub mod parallel;
pub mod perturb;
pub mod recipe;
pub mod tensorstore;
pub mod vectorops;

pub use error::{Error, Result};

pub const TOOL_VERSION: &str = concat!("vecforge ", env!("CARGO_PKG_VERSION"));
