use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::SelectorConfig;

/// Affine map `x -> x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        Linear {
            weight: normal(rng, (fan_in, fan_out), gain / (fan_in as f64).sqrt()),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn push<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn push<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view_mut().into_dyn()));
    }
}

/// Init gain of the attention output projection. Keeps what attention reads
/// from earlier tokens on the same scale as the embeddings it is added to.
const ATTN_OUT_GAIN: f64 = 8.0;

/// Init gain of the content-addressed query and key maps.
const RETRIEVAL_QK_GAIN: f64 = 2.0;

/// Weight of the per-cell term in a frame token's position embedding,
/// relative to the per-frame term all of that frame's tokens share.
const CELL_POSITION_WEIGHT: f64 = 0.1;

/// Pre-norm transformer block: causal multi-head attention then a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &SelectorConfig) -> Self {
        let d = cfg.d_model;
        Block {
            ln1: LayerNorm::identity(d),
            wq: Linear::init(rng, d, d, 1.0),
            wk: Linear::init(rng, d, d, 1.0),
            wv: Linear::init(rng, d, d, 1.0),
            wo: Linear::init(rng, d, d, ATTN_OUT_GAIN),
            ln2: LayerNorm::identity(d),
            fc1: Linear::init(rng, d, cfg.mlp_hidden, 1.0),
            fc2: Linear::init(rng, cfg.mlp_hidden, d, 1.0),
        }
    }

    /// Restricts queries and keys to the content half of the width and
    /// values to the position half, so attention is addressed by content
    /// and carries back where the match sat.
    fn into_retrieval(mut self, content_from: usize) -> Self {
        for w in [&mut self.wq.weight, &mut self.wk.weight] {
            w.slice_mut(s![..content_from, ..]).fill(0.0);
            *w *= RETRIEVAL_QK_GAIN;
        }
        self.wv.weight.slice_mut(s![content_from.., ..]).fill(0.0);
        self
    }

    fn zeros(cfg: &SelectorConfig) -> Self {
        let d = cfg.d_model;
        Block {
            ln1: LayerNorm::zeros(d),
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            fc1: Linear::zeros(d, cfg.mlp_hidden),
            fc2: Linear::zeros(cfg.mlp_hidden, d),
        }
    }
}

/// MLP from the score query's hidden state to `max_frames` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// All selector weights. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub config: SelectorConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    /// Alignment projector from visual features into model width.
    pub projector: Linear,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub score_query: Array1<f64>,
    pub score_head: ScoreHead,
}

fn content_start(d: usize) -> usize {
    d / 2
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Positions live in the first half of the width. Frame tokens get a
/// per-frame vector plus a small per-cell one, so a frame's position
/// survives averaging over its tokens; text and query slots are independent
/// draws.
fn position_init<R: Rng + ?Sized>(rng: &mut R, config: &SelectorConfig) -> Array2<f64> {
    let d = config.d_model;
    let m = config.tokens_per_frame;
    let frame = normal(rng, (config.max_frames, d), 1.0);
    let cell = normal(rng, (m, d), 1.0);
    let mut table = normal(rng, (config.positions(), d), 1.0);
    for j in 0..config.max_frames {
        for t in 0..m {
            let row = &frame.row(j) + &(&cell.row(t) * CELL_POSITION_WEIGHT);
            table.row_mut(j * m + t).assign(&row);
        }
    }
    table.slice_mut(s![.., content_start(d)..]).fill(0.0);
    table
}

impl SelectorParams {
    /// Seeded initialisation. The backbone (embeddings, blocks, final norm)
    /// plays the role of a frozen pretrained model: every block below the
    /// last is a content-addressed retrieval block, and the projector starts
    /// out writing into the content half of the width.
    pub fn init<R: Rng + ?Sized>(config: &SelectorConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let half = content_start(d);
        let token_embedding = normal(rng, (config.vocab, d), 1.0);
        let position_embedding = position_init(rng, config);
        let mut projector = Linear::init(rng, config.visual_dim, d, 1.0);
        projector.weight.slice_mut(s![.., ..half]).fill(0.0);
        let blocks = (0..config.layers)
            .map(|b| {
                let block = Block::init(rng, config);
                if b + 1 < config.layers {
                    block.into_retrieval(half)
                } else {
                    block
                }
            })
            .collect();
        let score_query = Array1::from(normal(rng, (1, d), 1.0).into_raw_vec_and_offset().0);
        let score_head = ScoreHead {
            fc1: Linear::init(rng, d, config.head_hidden, 1.0),
            fc2: Linear::init(rng, config.head_hidden, config.max_frames, 0.1),
        };
        SelectorParams {
            config: config.clone(),
            token_embedding,
            position_embedding,
            projector,
            blocks,
            final_norm: LayerNorm::identity(d),
            score_query,
            score_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn zeros(cfg: &SelectorConfig) -> Self {
        let d = cfg.d_model;
        SelectorParams {
            config: cfg.clone(),
            token_embedding: Array2::zeros((cfg.vocab, d)),
            position_embedding: Array2::zeros((cfg.positions(), d)),
            projector: Linear::zeros(cfg.visual_dim, d),
            blocks: (0..cfg.layers).map(|_| Block::zeros(cfg)).collect(),
            final_norm: LayerNorm::zeros(d),
            score_query: Array1::zeros(d),
            score_head: ScoreHead {
                fc1: Linear::zeros(d, cfg.head_hidden),
                fc2: Linear::zeros(cfg.head_hidden, cfg.max_frames),
            },
        }
    }

    /// Named views over every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view().into_dyn()),
            ("position_embedding".to_string(), self.position_embedding.view().into_dyn()),
        ];
        self.projector.push("projector", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            b.ln1.push(&format!("{p}.ln1"), &mut out);
            b.wq.push(&format!("{p}.attn.wq"), &mut out);
            b.wk.push(&format!("{p}.attn.wk"), &mut out);
            b.wv.push(&format!("{p}.attn.wv"), &mut out);
            b.wo.push(&format!("{p}.attn.wo"), &mut out);
            b.ln2.push(&format!("{p}.ln2"), &mut out);
            b.fc1.push(&format!("{p}.mlp.fc1"), &mut out);
            b.fc2.push(&format!("{p}.mlp.fc2"), &mut out);
        }
        self.final_norm.push("final_norm", &mut out);
        out.push(("score_query".to_string(), self.score_query.view().into_dyn()));
        self.score_head.fc1.push("score_head.fc1", &mut out);
        self.score_head.fc2.push("score_head.fc2", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view_mut().into_dyn()),
            ("position_embedding".to_string(), self.position_embedding.view_mut().into_dyn()),
        ];
        self.projector.push_mut("projector", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            b.ln1.push_mut(&format!("{p}.ln1"), &mut out);
            b.wq.push_mut(&format!("{p}.attn.wq"), &mut out);
            b.wk.push_mut(&format!("{p}.attn.wk"), &mut out);
            b.wv.push_mut(&format!("{p}.attn.wv"), &mut out);
            b.wo.push_mut(&format!("{p}.attn.wo"), &mut out);
            b.ln2.push_mut(&format!("{p}.ln2"), &mut out);
            b.fc1.push_mut(&format!("{p}.mlp.fc1"), &mut out);
            b.fc2.push_mut(&format!("{p}.mlp.fc2"), &mut out);
        }
        self.final_norm.push_mut("final_norm", &mut out);
        out.push(("score_query".to_string(), self.score_query.view_mut().into_dyn()));
        self.score_head.fc1.push_mut("score_head.fc1", &mut out);
        self.score_head.fc2.push_mut("score_head.fc2", &mut out);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}
