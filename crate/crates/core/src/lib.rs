//! Multi-agent collaborative perception on synthetic bird's-eye-view scenes.
//!
//! Agents observe a shared world with simulated LiDAR, encode their clouds to
//! BEV feature grids and exchange confidence-masked features with an ego
//! agent. The ego fuses its own history ([`cia`]), collaborator features
//! ([`ccc`]) and its current frame ([`iaf`]) before decoding rotated boxes
//! ([`detection`]). [`pipeline`] runs whole frames, baselines, training and
//! sweeps.

pub mod ccc;
pub mod cia;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod gridcore;
pub mod iaf;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
