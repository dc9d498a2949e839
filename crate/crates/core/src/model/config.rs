use serde::{Deserialize, Serialize};

use super::ModelError;

/// Residual encoder size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderDepth {
    Small,
    Medium,
    Large,
}

impl EncoderDepth {
    /// Residual blocks in each of the four stages.
    pub fn blocks(self) -> [usize; 4] {
        match self {
            EncoderDepth::Small => [1, 1, 1, 1],
            EncoderDepth::Medium => [2, 2, 2, 2],
            EncoderDepth::Large => [3, 4, 6, 3],
        }
    }
}

/// Where the reference prompt mask is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFusion {
    /// Multiply each pyramid level before aggregation.
    Pre,
    /// Multiply the aggregated stride-4 map.
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub encoder_depth: EncoderDepth,
    /// `(height, width)` of both network inputs.
    pub input_size: (usize, usize),
    pub attention_heads: usize,
    pub token_stride: usize,
    pub use_fpnc: bool,
    pub use_grid_sampling: bool,
    pub mask_fusion: MaskFusion,
    pub head_channels: usize,
    /// Convolution and projection biases.
    pub bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            encoder_depth: EncoderDepth::Small,
            input_size: (640, 640),
            attention_heads: 4,
            token_stride: 16,
            use_fpnc: true,
            use_grid_sampling: true,
            mask_fusion: MaskFusion::Pre,
            head_channels: 64,
            bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(ModelError::Config(format!(
                "input size {h}x{w} must be positive multiples of 32"
            )));
        }
        if ![4, 8, 16, 32].contains(&self.token_stride) {
            return Err(ModelError::Config(format!(
                "token stride {} not in {{4, 8, 16, 32}}",
                self.token_stride
            )));
        }
        if self.base_channels == 0 || self.head_channels == 0 {
            return Err(ModelError::Config("channel widths must be positive".into()));
        }
        if self.attention_heads == 0 || self.embed_dim() % self.attention_heads != 0 {
            return Err(ModelError::Config(format!(
                "embedding width {} not divisible by {} heads",
                self.embed_dim(),
                self.attention_heads
            )));
        }
        Ok(())
    }

    /// Token width `4C`.
    pub fn embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Stride of the token grid actually used by attention and the head.
    pub fn effective_token_stride(&self) -> usize {
        if self.use_grid_sampling {
            self.token_stride
        } else {
            4
        }
    }

    pub fn token_grid(&self) -> (usize, usize) {
        let s = self.effective_token_stride();
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    /// Channels of pyramid level `i` (strides 4, 8, 16, 32).
    pub fn level_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }
}
