//! Robustness benchmark for invisible image watermarks.

pub mod attack;
pub mod bench;
pub mod config;
pub mod corpus;
pub mod error;
pub mod image;
pub mod latent;
pub mod metrics;
pub mod raster;
pub mod scalar;
pub mod score;
pub mod seed;
pub mod spatial;
pub mod spectrum;

pub use error::{Error, Result};
pub use scalar::Real;
pub use score::{Codec, FidelityScore, FidelitySource, ProvenanceScore};

/// Double-precision image, the default working type.
pub type Image = image::ImageBuffer<f64>;
/// Single-precision image.
pub type ImageF32 = image::ImageBuffer<f32>;
pub type LatentField = latent::LatentField<f64>;
pub type RingKey = latent::RingKey<f64>;
