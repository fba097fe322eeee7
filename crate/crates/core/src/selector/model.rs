use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayViewD, Axis};
use serde::{Deserialize, Serialize};

use super::layers::{
    block_backward, block_forward, gelu, gelu_grad, layer_norm, layer_norm_backward, sigmoid, BlockCache,
    BlockGradRequest, LnCache,
};
use super::lora::LoraAdapters;
use super::params::SelectorParams;
use super::tokenizer::QuestionTokens;
use crate::error::{Error, Result};
use crate::frame_model::TokenGrid;

/// How much of the penultimate-block state to materialise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Every position's hidden state (`e_i`, `e^Q`, `e^q`).
    Full,
    /// Only the score query's row in the last block used by the head.
    ScoreOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Mean binary cross-entropy of the importance scores.
    Bce,
    /// Mean next-token cross-entropy of the instruction head.
    CrossEntropy,
}

#[derive(Debug, Clone)]
struct ScoreCache {
    frames: usize,
    query_pos: usize,
    frame_inputs: Array2<f64>,
    text_ids: Vec<usize>,
    suffix_ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    head_in: Array1<f64>,
    head_z: Array1<f64>,
    head_a: Array1<f64>,
}

/// Result of a score forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Importance scores `s`, one per frame, each in `(0, 1)`.
    pub scores: Vec<f64>,
    /// Pre-logistic head outputs for the same frames.
    pub logits: Vec<f64>,
    /// Penultimate-block state of the score query (`e^q`).
    pub query_state: Vec<f64>,
    /// Mean penultimate-block state of each frame's tokens (`e_i`); empty
    /// for [`ForwardMode::ScoreOnly`].
    pub frame_states: Vec<Vec<f64>>,
    /// Penultimate-block states of the question tokens (`e^Q`); empty for
    /// [`ForwardMode::ScoreOnly`].
    pub question_states: Vec<Vec<f64>>,
    cache: ScoreCache,
}

/// Gradients for every selector tensor plus optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: SelectorParams,
    pub adapters: Option<LoraAdapters>,
}

impl Gradients {
    pub fn zeros(params: &SelectorParams, adapters: Option<&LoraAdapters>) -> Self {
        Gradients {
            params: params.zeros_like(),
            adapters: adapters.map(LoraAdapters::zeros_like),
        }
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = self.params.tensors();
        if let Some(a) = &self.adapters {
            out.extend(a.tensors());
        }
        out
    }

    /// Adds `other * scale` into `self`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        let theirs = other.tensors();
        let mut mine = self.params.tensors_mut();
        if let Some(a) = self.adapters.as_mut() {
            mine.extend(a.tensors_mut());
        }
        for ((name, mut dst), (other_name, src)) in mine.into_iter().zip(theirs) {
            debug_assert_eq!(name, other_name);
            dst.scaled_add(scale, &src);
        }
    }
}

/// Which weight gradients to accumulate beyond the always-trainable
/// projector, score query and score head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradScope {
    pub backbone: bool,
    pub adapters: bool,
}

impl GradScope {
    pub const HEADS_ONLY: GradScope = GradScope {
        backbone: false,
        adapters: false,
    };
    pub const ALL: GradScope = GradScope {
        backbone: true,
        adapters: true,
    };
}

fn frame_inputs(params: &SelectorParams, frames: &[TokenGrid]) -> Result<Array2<f64>> {
    let cfg = &params.config;
    if frames.is_empty() {
        return Err(Error::domain("selector needs at least one frame"));
    }
    if frames.len() > cfg.max_frames {
        return Err(Error::domain(format!(
            "{} frames exceed the selector's max_frames {}",
            frames.len(),
            cfg.max_frames
        )));
    }
    let m = cfg.tokens_per_frame;
    let mut out = Array2::zeros((frames.len() * m, cfg.visual_dim));
    for (i, grid) in frames.iter().enumerate() {
        if grid.tokens() != m {
            return Err(Error::Shape {
                what: "tokens per frame",
                expected: m,
                got: grid.tokens(),
            });
        }
        if grid.dim != cfg.visual_dim {
            return Err(Error::Shape {
                what: "visual feature dim",
                expected: cfg.visual_dim,
                got: grid.dim,
            });
        }
        for (t, token) in grid.values.chunks_exact(grid.dim).enumerate() {
            out.row_mut(i * m + t).assign(&ndarray::ArrayView1::from(token));
        }
    }
    Ok(out)
}

fn check_ids(params: &SelectorParams, ids: &[usize]) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= params.config.vocab) {
        return Err(Error::domain(format!("token id {bad} outside vocab {}", params.config.vocab)));
    }
    Ok(())
}

/// Builds the input sequence `[projected frame tokens, text tokens,
/// (score query), suffix]` with positional embeddings added.
fn embed(
    params: &SelectorParams,
    frame_inputs: &Array2<f64>,
    text_ids: &[usize],
    with_query: bool,
    suffix_ids: &[usize],
) -> Result<Array2<f64>> {
    let vis = frame_inputs.nrows();
    let seq = vis + text_ids.len() + usize::from(with_query) + suffix_ids.len();
    if seq > params.config.positions() {
        return Err(Error::domain(format!(
            "sequence of {seq} tokens exceeds {} position slots",
            params.config.positions()
        )));
    }
    check_ids(params, text_ids)?;
    check_ids(params, suffix_ids)?;
    let mut x = Array2::zeros((seq, params.config.d_model));
    let mut proj = frame_inputs.dot(&params.projector.weight);
    proj += &params.projector.bias;
    x.slice_mut(s![..vis, ..]).assign(&proj);
    let mut row = vis;
    for &id in text_ids {
        x.row_mut(row).assign(&params.token_embedding.row(id));
        row += 1;
    }
    if with_query {
        x.row_mut(row).assign(&params.score_query);
        row += 1;
    }
    for &id in suffix_ids {
        x.row_mut(row).assign(&params.token_embedding.row(id));
        row += 1;
    }
    x += &params.position_embedding.slice(s![..seq, ..]);
    Ok(x)
}

/// Routes the gradient of the embedded sequence back into the projector,
/// score query and (optionally) the embedding tables.
fn embed_backward(
    dx: &Array2<f64>,
    frame_inputs: &Array2<f64>,
    token_rows: impl Iterator<Item = (usize, usize)>,
    query_row: Option<usize>,
    grads: &mut SelectorParams,
    backbone: bool,
) {
    let vis = frame_inputs.nrows();
    let d_vis = dx.slice(s![..vis, ..]);
    general_mat_mul(1.0, &frame_inputs.t(), &d_vis, 1.0, &mut grads.projector.weight);
    grads.projector.bias += &d_vis.sum_axis(Axis(0));
    if let Some(q) = query_row {
        grads.score_query += &dx.row(q);
    }
    if backbone {
        let seq = dx.nrows();
        grads.position_embedding.slice_mut(s![..seq, ..]).scaled_add(1.0, dx);
        for (row, id) in token_rows {
            let mut dst = grads.token_embedding.row_mut(id);
            dst += &dx.row(row);
        }
    }
}

fn score_forward_impl(
    params: &SelectorParams,
    frames: &[TokenGrid],
    question: &QuestionTokens,
    adapters: Option<&LoraAdapters>,
    mode: ForwardMode,
    suffix_ids: &[usize],
) -> Result<ForwardTrace> {
    let cfg = &params.config;
    check_adapters(params, adapters)?;
    let inputs = frame_inputs(params, frames)?;
    let n = frames.len();
    let text_ids = if question.ids.is_empty() {
        vec![super::tokenizer::PAD]
    } else {
        question.ids.clone()
    };
    let mut x = embed(params, &inputs, &text_ids, true, suffix_ids)?;
    let query_pos = inputs.nrows() + text_ids.len();
    let used = cfg.layers - 1;
    let mut caches = Vec::with_capacity(used);
    let mut from = 0;
    for b in 0..used {
        from = if b + 1 == used && mode == ForwardMode::ScoreOnly {
            query_pos
        } else {
            0
        };
        let adapter = adapters.map(|a| (&a.blocks[b], a.scale()));
        let (out, cache) = block_forward(x.view(), from, &params.blocks[b], adapter, cfg.heads);
        x = out;
        caches.push(cache);
    }

    let (frame_states, question_states) = if mode == ForwardMode::Full {
        let m = cfg.tokens_per_frame;
        let frames_h = (0..n)
            .map(|i| x.slice(s![i * m..(i + 1) * m, ..]).mean_axis(Axis(0)).expect("m >= 1").to_vec())
            .collect();
        let q_h = (0..text_ids.len())
            .map(|j| x.row(n * m + j).to_vec())
            .collect();
        (frames_h, q_h)
    } else {
        (Vec::new(), Vec::new())
    };

    let head_in = x.row(query_pos - from).to_owned();
    let mut head_z = head_in.dot(&params.score_head.fc1.weight);
    head_z += &params.score_head.fc1.bias;
    let head_a = head_z.mapv(gelu);
    let mut out = head_a.dot(&params.score_head.fc2.weight);
    out += &params.score_head.fc2.bias;
    let logits: Vec<f64> = out.iter().take(n).copied().collect();
    let scores = logits.iter().map(|&z| sigmoid(z)).collect();

    Ok(ForwardTrace {
        scores,
        logits,
        query_state: head_in.to_vec(),
        frame_states,
        question_states,
        cache: ScoreCache {
            frames: n,
            query_pos,
            frame_inputs: inputs,
            text_ids,
            suffix_ids: suffix_ids.to_vec(),
            blocks: caches,
            head_in,
            head_z,
            head_a,
        },
    })
}

fn check_adapters(params: &SelectorParams, adapters: Option<&LoraAdapters>) -> Result<()> {
    if let Some(a) = adapters {
        if a.blocks.len() != params.config.layers {
            return Err(Error::Shape {
                what: "adapter blocks",
                expected: params.config.layers,
                got: a.blocks.len(),
            });
        }
        let d = params.config.d_model;
        for b in &a.blocks {
            for lr in [&b.query, &b.value] {
                if lr.a.dim() != (d, a.rank) || lr.b.dim() != (a.rank, d) {
                    return Err(Error::domain("adapter factor shapes do not match the model"));
                }
            }
        }
    }
    Ok(())
}

/// Scores `frames` for `question`: `s = logistic(g_s(e^q))[..n]` where `e^q`
/// is the score query's output from the penultimate block.
pub fn forward(
    params: &SelectorParams,
    frames: &[TokenGrid],
    question: &QuestionTokens,
    adapters: Option<&LoraAdapters>,
) -> Result<ForwardTrace> {
    score_forward_impl(params, frames, question, adapters, ForwardMode::Full, &[])
}

pub fn forward_with_mode(
    params: &SelectorParams,
    frames: &[TokenGrid],
    question: &QuestionTokens,
    adapters: Option<&LoraAdapters>,
    mode: ForwardMode,
) -> Result<ForwardTrace> {
    score_forward_impl(params, frames, question, adapters, mode, &[])
}

/// Forward pass with extra tokens appended after the score query. Causal
/// masking means they cannot influence the scores.
pub fn forward_with_suffix(
    params: &SelectorParams,
    frames: &[TokenGrid],
    question: &QuestionTokens,
    adapters: Option<&LoraAdapters>,
    suffix_ids: &[usize],
) -> Result<ForwardTrace> {
    score_forward_impl(params, frames, question, adapters, ForwardMode::ScoreOnly, suffix_ids)
}

/// Numerically stable binary cross-entropy of `sigmoid(logit)` against `target`.
pub fn bce_from_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy `-log softmax(logits)[target]`, computed stably.
pub fn cross_entropy_from_logits(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits.iter().copied()) - logits[target]
}

/// Mean BCE over frames and its gradient with respect to every tensor.
pub fn backward(
    trace: &ForwardTrace,
    params: &SelectorParams,
    adapters: Option<&LoraAdapters>,
    target: &[f64],
    scope: GradScope,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros(params, if scope.adapters { adapters } else { None });
    let loss = backward_into(trace, params, adapters, target, scope, &mut grads)?;
    Ok((loss, grads))
}

pub fn backward_into(
    trace: &ForwardTrace,
    params: &SelectorParams,
    adapters: Option<&LoraAdapters>,
    target: &[f64],
    scope: GradScope,
    grads: &mut Gradients,
) -> Result<f64> {
    let cache = &trace.cache;
    let n = cache.frames;
    if target.len() != n {
        return Err(Error::Shape {
            what: "importance target",
            expected: n,
            got: target.len(),
        });
    }
    if let Some(i) = target.iter().position(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::domain(format!("target {i} = {} outside [0, 1]", target[i])));
    }
    let loss = trace
        .logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| bce_from_logit(z, t))
        .sum::<f64>()
        / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("BCE loss {loss} from logits {:?}", trace.logits),
        });
    }

    let cfg = &params.config;
    let g = &mut grads.params;
    let mut d_logits = Array1::zeros(cfg.max_frames);
    for i in 0..n {
        d_logits[i] = (trace.scores[i] - target[i]) / n as f64;
    }
    // score head
    let head = &params.score_head;
    for (mut row, &a) in g.score_head.fc2.weight.rows_mut().into_iter().zip(&cache.head_a) {
        row.scaled_add(a, &d_logits);
    }
    g.score_head.fc2.bias += &d_logits;
    let d_a = head.fc2.weight.dot(&d_logits);
    let d_z = &d_a * &cache.head_z.mapv(gelu_grad);
    for (mut row, &e) in g.score_head.fc1.weight.rows_mut().into_iter().zip(&cache.head_in) {
        row.scaled_add(e, &d_z);
    }
    g.score_head.fc1.bias += &d_z;
    let d_eq = head.fc1.weight.dot(&d_z);

    let used = cache.blocks.len();
    let last_from = cache.blocks[used - 1].from_row();
    let seq = cache.blocks[0].rows();
    let mut d_x = Array2::zeros((seq - last_from, cfg.d_model));
    d_x.row_mut(cache.query_pos - last_from).assign(&d_eq);
    for b in (0..used).rev() {
        let adapter = adapters.map(|a| (&a.blocks[b], a.scale()));
        let req = BlockGradRequest {
            block: scope.backbone.then(|| &mut g.blocks[b]),
            adapter: grads.adapters.as_mut().filter(|_| scope.adapters).map(|a| &mut a.blocks[b]),
        };
        d_x = block_backward(d_x.view(), &cache.blocks[b], &params.blocks[b], adapter, cfg.heads, req);
    }

    let vis = cache.frame_inputs.nrows();
    let tokens = cache
        .text_ids
        .iter()
        .enumerate()
        .map(|(j, &id)| (vis + j, id))
        .chain(
            cache
                .suffix_ids
                .iter()
                .enumerate()
                .map(|(j, &id)| (cache.query_pos + 1 + j, id)),
        )
        .collect::<Vec<_>>();
    embed_backward(
        &d_x,
        &cache.frame_inputs,
        tokens.into_iter(),
        Some(cache.query_pos),
        &mut grads.params,
        scope.backbone,
    );
    Ok(loss)
}

/// Next-token cross-entropy of the tied-embedding instruction head on
/// `[frames, question, response]`, with gradients.
///
/// Position `vis + l - 1 + j` predicts `response[j]`.
pub fn instruction_loss(
    params: &SelectorParams,
    frames: &[TokenGrid],
    question: &QuestionTokens,
    response: &[usize],
    adapters: Option<&LoraAdapters>,
    scope: GradScope,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let cfg = &params.config;
    check_adapters(params, adapters)?;
    if response.is_empty() {
        return Err(Error::domain("reference response is empty"));
    }
    check_ids(params, response)?;
    let inputs = frame_inputs(params, frames)?;
    let vis = inputs.nrows();
    let mut text_ids = if question.ids.is_empty() {
        vec![super::tokenizer::PAD]
    } else {
        question.ids.clone()
    };
    let first_pred = vis + text_ids.len() - 1;
    text_ids.extend_from_slice(&response[..response.len() - 1]);
    let mut x = embed(params, &inputs, &text_ids, false, &[])?;

    let mut caches = Vec::with_capacity(cfg.layers);
    for b in 0..cfg.layers {
        let from = if b + 1 == cfg.layers { first_pred } else { 0 };
        let adapter = adapters.map(|a| (&a.blocks[b], a.scale()));
        let (out, cache) = block_forward(x.view(), from, &params.blocks[b], adapter, cfg.heads);
        x = out;
        caches.push(cache);
    }
    let (hf, ln_cache): (Array2<f64>, LnCache) = layer_norm(x.view(), &params.final_norm);
    let logits = hf.dot(&params.token_embedding.t());
    let r = response.len() as f64;
    let mut loss = 0.0;
    let mut d_logits = Array2::zeros(logits.raw_dim());
    for (j, (row, mut drow)) in logits.rows().into_iter().zip(d_logits.rows_mut()).enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[response[j]];
        for (dv, &z) in drow.iter_mut().zip(row) {
            *dv = (z - lse).exp() / r;
        }
        drow[response[j]] -= 1.0 / r;
    }
    loss /= r;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("instruction loss {loss}"),
        });
    }

    let Some(grads) = grads else {
        return Ok(loss);
    };
    let g = &mut grads.params;
    let d_hf = d_logits.dot(&params.token_embedding);
    if scope.backbone {
        general_mat_mul(1.0, &d_logits.t(), &hf, 1.0, &mut g.token_embedding);
    }
    let mut d_x = layer_norm_backward(
        d_hf.view(),
        &ln_cache,
        &params.final_norm,
        scope.backbone.then_some(&mut g.final_norm),
    );
    for b in (0..cfg.layers).rev() {
        let adapter = adapters.map(|a| (&a.blocks[b], a.scale()));
        let req = BlockGradRequest {
            block: scope.backbone.then(|| &mut g.blocks[b]),
            adapter: grads.adapters.as_mut().filter(|_| scope.adapters).map(|a| &mut a.blocks[b]),
        };
        d_x = block_backward(d_x.view(), &caches[b], &params.blocks[b], adapter, cfg.heads, req);
    }
    let tokens = text_ids.iter().enumerate().map(|(j, &id)| (vis + j, id));
    embed_backward(&d_x, &inputs, tokens, None, &mut grads.params, scope.backbone);
    Ok(loss)
}
