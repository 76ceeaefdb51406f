use serde::{Deserialize, Serialize};

use crate::error::{MslError, Result};

/// Network dimensions. Channel counts follow the reference architecture
/// (64/128/256 encoder, 512/256 fusion upsampling, 128/64 decoder
/// upsampling, 1024 transformer width, 256 conditioning width) multiplied
/// by `width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub width: f64,
    pub patch_size: usize,
    pub model_dim: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            width: 0.25,
            patch_size: 4,
            model_dim: 256,
            heads: 1,
        }
    }

    /// Tiny network for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            width: 1.0 / 16.0,
            patch_size: 4,
            model_dim: 16,
            heads: 2,
        }
    }

    /// 384x384 images, full-width encoder and 1024-wide transformer.
    pub fn full_scale() -> Self {
        Self {
            image_size: 384,
            width: 1.0,
            patch_size: 4,
            model_dim: 1024,
            heads: 1,
        }
    }

    pub fn channels(&self, reference: usize) -> usize {
        ((reference as f64 * self.width).round() as usize).max(1)
    }

    /// Encoder widths `(c7s1, d1, d2)`.
    pub fn encoder_channels(&self) -> (usize, usize, usize) {
        (self.channels(64), self.channels(128), self.channels(256))
    }

    /// Fusion upsampling widths `(u1, u2)`; `u2` is the representation width.
    pub fn fusion_channels(&self) -> (usize, usize) {
        (self.channels(512), self.channels(256))
    }

    /// Decoder upsampling widths.
    pub fn decoder_channels(&self) -> (usize, usize) {
        (self.channels(128), self.channels(64))
    }

    pub fn cond_dim(&self) -> usize {
        self.channels(256)
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    /// Token grid side length.
    pub fn grid(&self) -> usize {
        self.feature_size() / self.patch_size
    }

    pub fn tokens_per_group(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_dim(&self) -> usize {
        self.encoder_channels().2 * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// Spatial size of the multi-sensor representation (and of spatial
    /// lambda maps).
    pub fn rep_size(&self) -> usize {
        self.feature_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MslError::Config(m));
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return bad(format!("image_size {} must be a power of two >= 16", self.image_size));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return bad(format!("width {} must be positive", self.width));
        }
        // The fused token grid is brought back to feature resolution by two
        // stride-2 upsampling blocks, so patches must be 4x4.
        if self.patch_size != 4 {
            return bad(format!("patch_size {} unsupported (must be 4)", self.patch_size));
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| MslError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}
