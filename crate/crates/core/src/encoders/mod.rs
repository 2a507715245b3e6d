//! Visual and text encoders.

mod text;
mod visual;

pub use text::TextEncoder;
pub use visual::{FrameLayout, VisualEncoder};

use serde::{Deserialize, Serialize};

use crate::error::{CopeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualEncoderConfig {
    /// Frames are square, `image_size x image_size`.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_cct_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub max_frames: usize,
    /// Class-token exchange across frames inside every block.
    pub temporal_exchange: bool,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            n_cct_blocks: 2,
            n_heads: 4,
            mlp_ratio: 4,
            max_frames: 8,
            temporal_exchange: true,
        }
    }
}

impl VisualEncoderConfig {
    /// Patches per frame.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        check_width(self.embed_dim, self.n_heads)?;
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(CopeError::config(
                "patch_size",
                format!("{} does not tile a {} pixel frame", self.patch_size, self.image_size),
            ));
        }
        if self.n_cct_blocks == 0 {
            return Err(CopeError::config("n_cct_blocks", "need at least one block"));
        }
        if self.max_frames == 0 {
            return Err(CopeError::config("max_frames", "must be at least 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(CopeError::config("mlp_ratio", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            embed_dim: 64,
            n_layers: 3,
            n_heads: 4,
            mlp_ratio: 4,
            max_len: 16,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_width(self.embed_dim, self.n_heads)?;
        if self.vocab_size < 2 {
            return Err(CopeError::config("vocab_size", "need the pad token and at least one word"));
        }
        if self.n_layers == 0 {
            return Err(CopeError::config("n_layers", "need at least one layer"));
        }
        if self.max_len == 0 {
            return Err(CopeError::config("max_len", "must be at least 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(CopeError::config("mlp_ratio", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_width(dim: usize, heads: usize) -> Result<()> {
    if dim == 0 || heads == 0 || dim % heads != 0 {
        return Err(CopeError::config(
            "embed_dim",
            format!("{dim} is not divisible by {heads} heads"),
        ));
    }
    Ok(())
}
