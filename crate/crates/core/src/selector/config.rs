use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy selector transformer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    /// Model width `d`.
    pub d_model: usize,
    /// Number of transformer blocks; at least two so a penultimate block exists.
    pub layers: usize,
    pub heads: usize,
    /// Visual tokens per frame (`g * g` after pooling).
    pub tokens_per_frame: usize,
    /// Width of the score head; frame counts above this are rejected.
    pub max_frames: usize,
    pub vocab: usize,
    /// Dimension of the incoming visual features.
    pub visual_dim: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    /// Text positions available for question (and reference response) tokens.
    pub max_text: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            tokens_per_frame: 9,
            max_frames: 32,
            vocab: 512,
            visual_dim: 16,
            mlp_hidden: 128,
            head_hidden: 128,
            max_text: 32,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.layers < 2 {
            return fail(format!("need at least 2 layers, got {}", self.layers));
        }
        if self.tokens_per_frame == 0 || self.max_frames == 0 || self.visual_dim == 0 {
            return fail("tokens_per_frame, max_frames and visual_dim must be positive".into());
        }
        let side = (self.tokens_per_frame as f64).sqrt().round() as usize;
        if side * side != self.tokens_per_frame {
            return fail(format!(
                "tokens_per_frame {} is not a square grid",
                self.tokens_per_frame
            ));
        }
        if self.vocab < 2 || self.max_text < 2 {
            return fail("vocab and max_text must be at least 2".into());
        }
        if self.mlp_hidden == 0 || self.head_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn grid_side(&self) -> usize {
        (self.tokens_per_frame as f64).sqrt().round() as usize
    }

    /// Learned absolute position slots.
    pub fn positions(&self) -> usize {
        self.max_frames * self.tokens_per_frame + self.max_text + 1
    }
}
