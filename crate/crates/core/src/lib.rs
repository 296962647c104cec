//! Deterministic desk-scale simulator of block-wise video diffusion streamed
//! through a layer-partitioned device pipeline.
//!
//! Frame blocks sit in a FIFO queue at staggered noise levels and are pushed,
//! tail first, through `N` simulated devices that each own `L / N` layers of a
//! toy DiT. Devices keep the previous block's self-attention K/V so only the
//! lower-noise neighbour has to be sent explicitly. New blocks draw their noise
//! from a shared pool while avoiding the ids that sit in the concatenation
//! window. The [`analytics`] module evaluates the closed-form bubble and
//! communication/memory models that the simulated schedule is checked against.

pub mod analytics;
pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod queue;
pub mod report;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
