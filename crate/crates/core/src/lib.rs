//! Encoder, toy style-based generator, loss stack and training loop for
//! inverting images into the extended latent space of a style generator.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod geometry;
pub mod losses;
pub mod map2style;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
