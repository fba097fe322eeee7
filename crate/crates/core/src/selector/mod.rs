//! Score-query selector: a toy decoder-only transformer that reads pooled
//! visual tokens, question tokens and a learnable score query, and maps the
//! query's penultimate-block state to per-frame importance scores.

pub mod checkpoint;
mod config;
mod layers;
mod lora;
mod model;
mod params;
mod tokenizer;

pub use config::SelectorConfig;
pub use lora::{BlockAdapters, LoraAdapters, LowRank};
pub use model::{
    backward, backward_into, bce_from_logit, cross_entropy_from_logits, forward, forward_with_mode, forward_with_suffix, instruction_loss,
    ForwardMode, ForwardTrace, GradScope, Gradients, LossKind,
};
pub use params::{Block, LayerNorm, Linear, ScoreHead, SelectorParams};
pub use tokenizer::{QuestionTokens, Tokenizer, PAD};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STAGE1_PREFIXES: [&str; 3] = ["projector.", "score_query", "score_head."];
const ADAPTER_PREFIX: &str = "lora.";

/// Training stage; decides which tensors are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Projector, score query and score head.
    One,
    /// Stage one's set plus the LoRA adapters.
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(Error::domain(format!("stage must be 1 or 2, got {other}"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// The set of trainable tensor names for a stage; everything else is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainables {
    pub stage: Stage,
}

impl Trainables {
    pub fn contains(&self, name: &str) -> bool {
        STAGE1_PREFIXES.iter().any(|p| name.starts_with(p))
            || (self.stage == Stage::Two && name.starts_with(ADAPTER_PREFIX))
    }

    pub fn includes_adapters(&self) -> bool {
        self.stage == Stage::Two
    }

    pub fn grad_scope(&self) -> GradScope {
        GradScope {
            backbone: false,
            adapters: self.includes_adapters(),
        }
    }

    /// Names of the trainable tensors present in `params` / `adapters`.
    pub fn names(&self, params: &SelectorParams, adapters: Option<&LoraAdapters>) -> Vec<String> {
        let mut names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        if let Some(a) = adapters {
            names.extend(a.tensors().into_iter().map(|(n, _)| n));
        }
        names.retain(|n| self.contains(n));
        names
    }
}

pub fn select_trainables(stage: u8) -> Result<Trainables> {
    Ok(Trainables {
        stage: Stage::try_from(stage)?,
    })
}


#[cfg(test)]
mod model_tests;
