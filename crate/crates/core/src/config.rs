use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Everything that determines parameter shapes
/// lives here, so a checkpoint header carrying this struct is enough to
/// rebuild and validate a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side length; must be divisible by 16.
    pub image_size: usize,
    /// Channels of the two shallow pyramid levels (strides 4 and 8).
    pub shallow_channels: usize,
    /// Channels of the deepest level (stride 16).
    pub deep_channels: usize,
    pub heads: usize,
    /// Transformer blocks after each level's patch embedding.
    pub encoder_depth: usize,
    pub mlp_ratio: usize,
    /// Chebyshev radius of the local cross-attention window, in patches.
    pub radius: usize,
    /// Stacked cross-modal attention blocks at the deepest level.
    pub hca_blocks: usize,
    /// Width of the decoder's complementing modules.
    pub dcm_channels: usize,
    /// 1 for a raw depth map; 3 lets the depth stream take an RGB-shaped input.
    pub depth_channels: usize,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale model: 64×64 input, levels 16×16×16, 8×8×16, 4×4×96.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            shallow_channels: 16,
            deep_channels: 96,
            heads: 2,
            encoder_depth: 1,
            mlp_ratio: 2,
            radius: 1,
            hca_blocks: 1,
            dcm_channels: 16,
            depth_channels: 1,
            ln_eps: 1e-5,
            seed: 0,
        }
    }

    /// The published feature shapes: 224×224 input, levels 56×56×64,
    /// 28×28×64, 14×14×384.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 224,
            shallow_channels: 64,
            deep_channels: 384,
            dcm_channels: 64,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return fail(format!("image_size {} must be a positive multiple of 16", self.image_size));
        }
        if self.heads == 0 {
            return fail("heads must be positive".into());
        }
        for (name, c) in [
            ("shallow_channels", self.shallow_channels),
            ("deep_channels", self.deep_channels),
        ] {
            if c == 0 || c % self.heads != 0 {
                return fail(format!("{name} {c} must be a positive multiple of heads {}", self.heads));
            }
        }
        if self.mlp_ratio == 0 || self.dcm_channels == 0 || self.hca_blocks == 0 {
            return fail("mlp_ratio, dcm_channels and hca_blocks must be positive".into());
        }
        if !matches!(self.depth_channels, 1 | 3) {
            return fail(format!("depth_channels must be 1 or 3, got {}", self.depth_channels));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// `(side, channels)` of pyramid levels 1, 2, 3 (strides 4, 8, 16).
    pub fn levels(&self) -> [(usize, usize); 3] {
        [
            (self.image_size / 4, self.shallow_channels),
            (self.image_size / 8, self.shallow_channels),
            (self.image_size / 16, self.deep_channels),
        ]
    }
}
