//! Two-tower retrieval whose user tower reconstructs the next positive item
//! with a drift-based diffusion module and fuses it with the behavior
//! history through mixed attention.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode autodiff, sampling, gradient checks
//! - [`nn`]: parameterised layers built on the autodiff graph
//! - [`data`]: log parsing, sequence building, session split, leave-one-out
//! - [`diffusion`]: noise schedules, drift, U-Net approximator, sampling
//! - [`towers`]: item/user towers and the composite loss
//! - [`experiment`]: training, evaluation, ablations, timing, reports

pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod numerics;
pub mod par;
pub mod towers;

pub use error::{Error, Result};
