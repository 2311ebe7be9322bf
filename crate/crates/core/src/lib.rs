//! Image generation from a spherical autoencoder latent, at desk scale.
//!
//! Images are encoded onto the sphere of radius `√L`, trained so that noisy
//! neighbourhoods of real latents cover the sphere, and generated by decoding
//! random sphere points (optionally refined by a few encode/decode rounds).

pub mod batch;
pub mod error;
pub mod geometry;
pub mod sampling;

#[cfg(feature = "model")]
pub mod cli;
#[cfg(feature = "model")]
pub mod config;
#[cfg(feature = "model")]
pub mod data;
#[cfg(feature = "model")]
pub mod evaluation;
#[cfg(feature = "model")]
pub mod losses;
#[cfg(feature = "model")]
pub mod network;
#[cfg(feature = "model")]
pub mod training;

pub use batch::ImageBatch;
pub use error::{Result, SphereError};
