use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Learnable per-head additive attention bias over token positions.
    #[serde(default)]
    pub use_attn_bias: bool,
    /// Train-mode dropout on attention weights.
    #[serde(default)]
    pub attn_dropout_rate: f64,
}

impl ModelConfig {
    /// Depth-2, width-16 model on 4×4 single-channel images.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            dim: 16,
            heads: 2,
            depth: 2,
            mlp_ratio: 4,
            num_classes: 3,
            use_attn_bias: false,
            attn_dropout_rate: 0.0,
        }
    }

    /// Desk-scale MNIST model: depth 4, width 64, 4 heads, 4×4 patches.
    pub fn mnist() -> Self {
        ModelConfig {
            image_size: 28,
            patch_size: 4,
            channels: 1,
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            num_classes: 10,
            use_attn_bias: false,
            attn_dropout_rate: 0.0,
        }
    }

    /// ViT-Base/16 at 224 pixels.
    pub fn vit_base() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            dim: 768,
            heads: 12,
            depth: 12,
            mlp_ratio: 4,
            num_classes: 1000,
            use_attn_bias: false,
            attn_dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.channels == 0 || self.num_classes == 0 {
            return fail("channels and num_classes must be positive".into());
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.attn_dropout_rate) {
            return fail(format!(
                "attn_dropout_rate must be in [0, 1), got {}",
                self.attn_dropout_rate
            ));
        }
        Ok(())
    }

    /// Patch count without the class token.
    pub fn num_patches(&self) -> usize {
        let grid = self.image_size / self.patch_size;
        grid * grid
    }

    /// Full sequence length, class token included.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}
