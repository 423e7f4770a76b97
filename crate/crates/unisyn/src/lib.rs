//! Unified multi-modal image synthesis: a single generative model that
//! imputes any missing subset of co-registered image modalities from any
//! available subset.

pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod data;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod nn;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete single-precision model types (training default).
pub type Generator32 = generator::Generator<f32>;
pub type Discriminators32 = discriminator::Discriminators<f32>;

/// Concrete double-precision model types (gradient checks, oracles).
pub type Generator64 = generator::Generator<f64>;
pub type Discriminators64 = discriminator::Discriminators<f64>;
