//! Transformer encoder/decoder with AdaLN-Zero conditioning, 2-D rotary and
//! sinusoidal positions, and MLP-Mixer latent heads.

mod checkpoint;
mod config;
mod layers;
mod model;
mod params;
pub mod positional;

pub use checkpoint::{ArrayData, Checkpoint, NamedArray};
pub use config::ModelConfig;
pub use layers::{layer_norm, softmax, DitBlock, Linear, Rotary};
pub use model::{
    bound_norm, noisy_spherify_batch, spherify_batch, tensor_to_images, Condition, Label, PassCounts,
    SphereModel,
};
pub use params::{Init, ParamStore};

#[cfg(test)]
mod tests;
