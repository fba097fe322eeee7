//! Low-rank adapters on the attention query and value projections.

use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::params::normal;
use super::SelectorConfig;
use crate::error::{Error, Result};

/// `x -> scale * (x A) B` with `A: d x r`, `B: r x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapters {
    pub query: LowRank,
    pub value: LowRank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters {
    pub rank: usize,
    pub alpha: f64,
    pub blocks: Vec<BlockAdapters>,
}

impl LoraAdapters {
    /// Fresh adapters: `A` Gaussian, `B` zero, so the adapted model starts
    /// out identical to the base model.
    pub fn init<R: Rng + ?Sized>(config: &SelectorConfig, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::config("LoRA alpha must be positive"));
        }
        let d = config.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let pair = |rng: &mut R| LowRank {
            a: normal(rng, (d, rank), std),
            b: Array2::zeros((rank, d)),
        };
        let blocks = (0..config.layers)
            .map(|_| BlockAdapters {
                query: pair(rng),
                value: pair(rng),
            })
            .collect();
        Ok(LoraAdapters { rank, alpha, blocks })
    }

    pub fn zeros(config: &SelectorConfig, rank: usize, alpha: f64) -> Self {
        let d = config.d_model;
        let pair = || LowRank {
            a: Array2::zeros((d, rank)),
            b: Array2::zeros((rank, d)),
        };
        LoraAdapters {
            rank,
            alpha,
            blocks: (0..config.layers)
                .map(|_| BlockAdapters {
                    query: pair(),
                    value: pair(),
                })
                .collect(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn zeros_like(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockAdapters {
                query: LowRank {
                    a: Array2::zeros(b.query.a.raw_dim()),
                    b: Array2::zeros(b.query.b.raw_dim()),
                },
                value: LowRank {
                    a: Array2::zeros(b.value.a.raw_dim()),
                    b: Array2::zeros(b.value.b.raw_dim()),
                },
            })
            .collect();
        LoraAdapters {
            rank: self.rank,
            alpha: self.alpha,
            blocks,
        }
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (kind, lr) in [("query", &b.query), ("value", &b.value)] {
                out.push((format!("lora.{i}.{kind}.a"), lr.a.view().into_dyn()));
                out.push((format!("lora.{i}.{kind}.b"), lr.b.view().into_dyn()));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (kind, lr) in [("query", &mut b.query), ("value", &mut b.value)] {
                out.push((format!("lora.{i}.{kind}.a"), lr.a.view_mut().into_dyn()));
                out.push((format!("lora.{i}.{kind}.b"), lr.b.view_mut().into_dyn()));
            }
        }
        out
    }

    /// Whether every `B` factor is exactly zero.
    pub fn is_identity(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.query.b.iter().all(|&v| v == 0.0) && b.value.b.iter().all(|&v| v == 0.0))
    }
}
