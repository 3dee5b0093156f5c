use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture of the toy Vision Transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for VitConfig {
    /// Desk scale: 32×32×3 images, 4×4 patches, d = 64, 4 heads, 4 blocks.
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            depth: 4,
            mlp_ratio: 2,
            num_classes: 10,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vit.image_size", self.image_size),
            ("vit.channels", self.channels),
            ("vit.patch_size", self.patch_size),
            ("vit.embed_dim", self.embed_dim),
            ("vit.num_heads", self.num_heads),
            ("vit.depth", self.depth),
            ("vit.mlp_ratio", self.mlp_ratio),
            ("vit.num_classes", self.num_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "vit.patch_size",
                format!("{} does not divide image size {}", self.patch_size, self.image_size),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "vit.num_heads",
                format!("{} does not divide embed dim {}", self.num_heads, self.embed_dim),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Pixels per image.
    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}
