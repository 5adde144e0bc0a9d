//! Joint scene flow and occlusion estimation on point-cloud pairs.
//!
//! The crate is organised bottom-up: [`diffmath`] is a small reverse-mode
//! autodiff engine, [`geometry`] holds the non-learned point kernels,
//! [`network`] builds the coarse-to-fine model with its occlusion-weighted cost
//! volume, [`losses`] the supervised and self-supervised objectives, [`trainer`]
//! the optimisation loops, [`datagen`] the procedural scenes and file format,
//! and [`evalkit`] the metrics and brute-force oracles.

pub mod datagen;
pub mod diffmath;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod real;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Exec;
pub use real::Real;
