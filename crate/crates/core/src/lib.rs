//! Memory-bounded haze removal for arbitrarily large images.
//!
//! Images are cut into fixed-size patches, encoded a few patches at a time,
//! mixed globally by an attention bottleneck over all patch tokens, and
//! decoded back with skip connections. The crate also provides attribution
//! maps, synthetic haze generation, quality metrics and a training loop.

pub mod attention;
pub mod bottleneck;
pub mod checkpoint;
pub mod config;
pub mod dam;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod haze;
pub mod image;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use image::{BitDepth, ImageTensor};
pub use model::{DehazeModel, RunStats};
pub use tiling::{partition, reassemble, PatchBatch, TileLayout};
