use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    /// Patch size `M` in pixels.
    pub patch: usize,
    /// Token width `C`.
    pub channels: usize,
    /// Number of learnable body tokens `B`.
    pub body_tokens: usize,
    pub depth: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("encoder config", m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 || self.height == 0 || self.width == 0 {
            return bad(format!("patch {} must divide {}x{}", self.patch, self.height, self.width));
        }
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return bad(format!("{} channels not divisible by {} heads", self.channels, self.heads));
        }
        if self.body_tokens == 0 {
            return bad("at least one body token is required".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// With `false`, hand and face parameters come from a fallback head
    /// on the encoder's body tokens.
    pub enabled: bool,
    /// With `false`, component tokens are learnable embeddings only and
    /// every reference point sits at the crop centre.
    pub keypoint_guided: bool,
    /// Upsampling factors, ascending powers of two starting at 1.
    pub scales: Vec<usize>,
    /// RoIAlign output size at scale 1.
    pub crop_h: usize,
    pub crop_w: usize,
    /// Decoder width `C'`.
    pub channels: usize,
    pub k_hand: usize,
    pub k_face: usize,
    /// Deformable attention blocks `N`.
    pub blocks: usize,
    pub points: usize,
    pub heads: usize,
}

impl DecoderConfig {
    pub fn num_tokens(&self) -> usize {
        2 * self.k_hand + self.k_face
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("decoder config", m));
        if self.scales.first() != Some(&1) {
            return bad(format!("scales {:?} must start at 1", self.scales));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) || self.scales.iter().any(|s| !s.is_power_of_two()) {
            return bad(format!("scales {:?} must be ascending powers of two", self.scales));
        }
        if self.crop_h == 0 || self.crop_w == 0 || self.points == 0 || self.k_hand == 0 || self.k_face == 0 {
            return bad("crop size, points and token counts must be positive".into());
        }
        if self.heads == 0 || self.channels % self.heads != 0 || self.channels % 4 != 0 || self.channels == 0 {
            return bad(format!(
                "{} channels must be a multiple of 4 and of {} heads",
                self.channels, self.heads
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Desk-scale model: 64x48 input, 8x8 patches, `C = 64`.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                height: 64,
                width: 48,
                patch: 8,
                channels: 64,
                body_tokens: 27,
                depth: 2,
                heads: 4,
            },
            decoder: DecoderConfig {
                enabled: true,
                keypoint_guided: true,
                scales: vec![1, 2, 4],
                crop_h: 4,
                crop_w: 4,
                channels: 32,
                k_hand: 21,
                k_face: 50,
                blocks: 1,
                points: 4,
                heads: 4,
            },
        }
    }

    /// Full-size model: 256x192 input, ViT-Base-like encoder.
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig {
                height: 256,
                width: 192,
                patch: 16,
                channels: 768,
                body_tokens: 27,
                depth: 12,
                heads: 12,
            },
            decoder: DecoderConfig {
                enabled: true,
                keypoint_guided: true,
                scales: vec![1, 2, 4],
                crop_h: 8,
                crop_w: 8,
                channels: 384,
                k_hand: 21,
                k_face: 50,
                blocks: 2,
                points: 4,
                heads: 8,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}
