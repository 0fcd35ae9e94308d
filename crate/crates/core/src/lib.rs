//! Spatial- and scale-uncertainty-aware segmentation (SSU-Net) on CPU.
//!
//! A Monte-Carlo-dropout U-Net estimates per-pixel epistemic and aleatoric
//! uncertainty; a second U-Net consumes those maps through a gated soft
//! attention block ([`gsua`]) and fuses three side outputs with a
//! confidence-weighted max ([`msua`]). Everything down to the tensor and
//! autodiff layer ([`tensor`]) is implemented in this crate.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gsua;
pub mod io;
pub mod metrics;
pub mod msua;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
