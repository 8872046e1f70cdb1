//! Partition-of-unity neural fields for dynamic circular-Radon tomography,
//! trained by stochastic proximal splitting, plus the low-rank baselines and
//! image metrics used to evaluate them.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats and the command-line front end live in the `proxnf`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
pub mod crt;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod metrics;
pub mod phantom;
pub mod pounet;
pub mod proxnf;
pub mod sparse;

pub use nalgebra;

pub use error::{Error, Result};
pub use grid::{ImageStack, RoiMask, SpacetimeGrid};
