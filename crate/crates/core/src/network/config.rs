use serde::{Deserialize, Serialize};

use crate::error::{Result, SphereError};
use crate::geometry::LatentShape;

/// Architecture of the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_size: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mixer_depth: usize,
    /// Latent channel depth `d`.
    pub latent_channels: usize,
    /// 0 for an unconditional model.
    pub n_classes: usize,
    #[serde(default = "default_null_drop")]
    pub cfg_null_drop_prob: f64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_null_drop() -> f64 {
    0.1
}

fn default_mlp_ratio() -> usize {
    4
}

impl ModelConfig {
    /// Default recipe: 24×24×3 images, 3 classes, `P = 2`, `L = 12²×8 = 1152`
    /// (volume compression 1.5).
    pub fn toy() -> Self {
        Self {
            image_size: 24,
            channels: 3,
            patch_size: 2,
            hidden_size: 128,
            n_blocks: 4,
            n_heads: 4,
            mixer_depth: 2,
            latent_channels: 8,
            n_classes: 3,
            cfg_null_drop_prob: 0.1,
            mlp_ratio: 4,
        }
    }

    /// Single-core variant of [`toy`](Self::toy): `P = 4` and `d = 32` keep
    /// `L = 1152` with a quarter of the tokens, on a narrower network.
    pub fn toy_fast() -> Self {
        Self {
            patch_size: 4,
            hidden_size: 64,
            n_blocks: 3,
            latent_channels: 32,
            ..Self::toy()
        }
    }

    /// Smallest config used by gradient checks: 8px, `L = 4²×4 = 64`.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            patch_size: 2,
            hidden_size: 16,
            n_blocks: 2,
            n_heads: 2,
            mixer_depth: 1,
            latent_channels: 4,
            n_classes: 2,
            cfg_null_drop_prob: 0.1,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SphereError::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return err("image_size, patch_size and channels must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.hidden_size % self.n_heads != 0 {
            return err(format!(
                "hidden_size {} is not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            ));
        }
        if self.head_dim() % 4 != 0 {
            return err(format!(
                "head dimension {} must be a multiple of 4 for 2-D rotary encoding",
                self.head_dim()
            ));
        }
        if self.hidden_size % 4 != 0 {
            return err(format!(
                "hidden_size {} must be a multiple of 4 for 2-D sinusoidal encoding",
                self.hidden_size
            ));
        }
        if self.latent_channels == 0 || self.mlp_ratio == 0 {
            return err("latent_channels and mlp_ratio must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cfg_null_drop_prob) {
            return err(format!(
                "cfg_null_drop_prob must lie in [0, 1], got {}",
                self.cfg_null_drop_prob
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::new(self.grid(), self.grid(), self.latent_channels)
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape().len()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    /// Pixel element count over latent element count.
    pub fn compression_ratio(&self) -> f64 {
        self.pixel_count() as f64 / self.latent_len() as f64
    }

    pub fn is_conditional(&self) -> bool {
        self.n_classes > 0
    }

    /// Rows of each class-embedding table (classes plus null, or one global row).
    pub fn embedding_rows(&self) -> usize {
        if self.is_conditional() {
            self.n_classes + 1
        } else {
            1
        }
    }
}
