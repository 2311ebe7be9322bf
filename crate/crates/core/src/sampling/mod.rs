//! Generation: one-step decoding of random sphere points, few-step
//! refinement with classifier-free guidance, and image editing built on the
//! same encode/decode loop.

#[cfg(feature = "model")]
mod generate;
pub mod plan;

#[cfg(feature = "model")]
pub use generate::*;
pub use plan::*;
