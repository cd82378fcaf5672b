//! Toy transformer encoders over the gradient tape: a frozen text encoder
//! with per-layer trace capture, a frozen or visually prompted image
//! encoder, bias-capable multi-head attention, and the normalized projection
//! heads into the joint embedding space.

mod attention;
mod image;
mod text;
mod weights;

pub use attention::{biased_attention, transformer_block, LayerValues};
pub use image::{encode_image, encode_image_frozen, patchify};
pub use text::{encode_text_frozen, encode_text_str, project, LayerTrace};
pub use weights::{FrozenImageWeights, FrozenTextWeights, LayerWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one encoder. Text encoders leave the image-only fields
/// (`patch_side`, `n_visual_prompts`) at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub max_sequence: usize,
    pub patch_side: usize,
    pub n_visual_prompts: usize,
    pub d_joint: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_k {
            return Err(Error::Config(format!(
                "d_model {} must equal n_heads {} x d_k {}",
                self.d_model, self.n_heads, self.d_k
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config(format!(
                "n_layers {} must be at least 2",
                self.n_layers
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("max_sequence", self.max_sequence),
            ("d_joint", self.d_joint),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Desk-scale text encoder.
    pub fn desk_text() -> Self {
        EncoderConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            max_sequence: 64,
            patch_side: 0,
            n_visual_prompts: 0,
            d_joint: 32,
        }
    }

    /// Desk-scale image encoder (16x16 images, 4x4 patches, 2 visual
    /// prompts per layer).
    pub fn desk_image() -> Self {
        EncoderConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            max_sequence: 32,
            patch_side: 4,
            n_visual_prompts: 2,
            d_joint: 32,
        }
    }

    /// Micro text encoder for finite-difference checks.
    pub fn micro_text() -> Self {
        EncoderConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_k: 4,
            max_sequence: 48,
            patch_side: 0,
            n_visual_prompts: 0,
            d_joint: 8,
        }
    }

    /// Micro image encoder (8x8 images, one visual prompt per layer).
    pub fn micro_image() -> Self {
        EncoderConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_k: 4,
            max_sequence: 16,
            patch_side: 4,
            n_visual_prompts: 1,
            d_joint: 8,
        }
    }
}
