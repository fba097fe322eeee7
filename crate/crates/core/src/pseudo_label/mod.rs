//! Spatial and temporal pseudo-labels from chat backends, and their fusion
//! into selector training targets.

mod backend;
mod cache;
pub mod http;
mod mock;
pub mod prompts;
mod scripted;

pub use backend::{
    BackendKind, CallKey, Capabilities, ChatBackend, ChatRequest, ChatResponse, ImagePayload, TokenLogprob,
    TopLogprob, GRID_MIME,
};
pub use cache::CachedBackend;
pub use http::{HttpBackend, HttpConfig};
pub use mock::MockBackend;
pub use scripted::ScriptedBackend;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{bounded_map, Exec};
use prompts::{CAPTION_PROMPT, EVAL_MARKER, FALLBACK_SUFFIX};

/// Alternatives requested per generated token.
pub const TOP_LOGPROBS: usize = 10;
pub const DEFAULT_WANT: usize = 8;
pub const EMPTY_CAPTION: &str = "(no caption)";

/// One frame handed to a labeler.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub video_id: String,
    pub frame_index: usize,
    pub image: ImagePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialLabelRaw {
    pub frame_index: usize,
    pub p_true: f64,
    pub p_false: f64,
    pub fallback_used: bool,
    pub response: String,
}

impl SpatialLabelRaw {
    pub fn score(&self) -> f64 {
        spatial_score(self.p_true, self.p_false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalLabel {
    /// 0-based, ascending.
    pub helpful_set: Vec<usize>,
    pub parse_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelRecord {
    pub video_id: String,
    pub question_id: String,
    pub spatial: Vec<f64>,
    pub temporal: Vec<f64>,
    pub fused: Vec<f64>,
}

impl PseudoLabelRecord {
    pub fn new(video_id: impl Into<String>, question_id: impl Into<String>, spatial: Vec<f64>, temporal: Vec<f64>) -> Result<Self> {
        let fused = fuse(&spatial, &temporal)?;
        Ok(PseudoLabelRecord {
            video_id: video_id.into(),
            question_id: question_id.into(),
            spatial,
            temporal,
            fused,
        })
    }
}

/// `p_true / (p_true + p_false)`; 0.5 when both vanish, the limit of
/// `s(x, x)`.
pub fn spatial_score(p_true: f64, p_false: f64) -> f64 {
    let total = p_true + p_false;
    if total > 0.0 {
        p_true / total
    } else {
        0.5
    }
}

/// Divides by the maximum; an all-zero vector stays zero.
pub fn normalize_spatial(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::domain("cannot normalize an empty score vector"));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::domain(format!("spatial score {bad} outside [0, 1]")));
    }
    let max = scores.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores.iter().map(|s| s / max).collect())
}

pub fn binarize_temporal(label: &TemporalLabel, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &i in label.helpful_set.iter().filter(|&&i| i < n) {
        v[i] = 1.0;
    }
    v
}

pub fn fuse(spatial: &[f64], temporal: &[f64]) -> Result<Vec<f64>> {
    if spatial.len() != temporal.len() {
        return Err(Error::Shape {
            what: "fused label length",
            expected: spatial.len(),
            got: temporal.len(),
        });
    }
    Ok(spatial.iter().zip(temporal).map(|(a, b)| (a + b) / 2.0).collect())
}

fn require(backend: &dyn ChatBackend, images: bool, logprobs: bool) -> Result<()> {
    let caps = backend.capabilities();
    if images && !caps.supports_images {
        return Err(Error::config(format!("{:?} backend does not accept images", backend.kind())));
    }
    if logprobs && !caps.supports_token_logprobs {
        return Err(Error::config(format!(
            "{:?} backend does not expose token logprobs, which spatial labeling needs",
            backend.kind()
        )));
    }
    Ok(())
}

fn is_true(token: &str) -> bool {
    token.trim().eq_ignore_ascii_case("true")
}

fn is_false(token: &str) -> bool {
    token.trim().eq_ignore_ascii_case("false")
}

/// Sums True/False mass over a token's alternatives (or the token itself
/// when no alternatives were returned).
fn verdict_mass(token: &TokenLogprob) -> (f64, f64) {
    let single = [TopLogprob {
        token: token.token.clone(),
        logprob: token.logprob,
    }];
    let alts: &[TopLogprob] = if token.top.is_empty() { &single } else { &token.top };
    let mut t = 0.0;
    let mut f = 0.0;
    for a in alts {
        if is_true(&a.token) {
            t += a.logprob.exp();
        } else if is_false(&a.token) {
            f += a.logprob.exp();
        }
    }
    (t.min(1.0), f.min(1.0))
}

/// The first token carrying non-space text after the last `Evaluation:`.
fn verdict_token(tokens: &[TokenLogprob]) -> Option<&TokenLogprob> {
    let joined: String = tokens.iter().map(|t| t.token.as_str()).collect();
    let marker_end = joined.rfind(EVAL_MARKER)? + EVAL_MARKER.len();
    let mut offset = 0;
    for t in tokens {
        let end = offset + t.token.len();
        if end > marker_end && !joined[offset.max(marker_end)..end].trim().is_empty() {
            return Some(t);
        }
        offset = end;
    }
    None
}

fn has_verdict(text: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)Evaluation:\s*(True|False)").expect("static regex"))
        .is_match(text)
}

/// Scores one frame for `question` with the chain-of-thought prompt.
pub fn spatial_score_frame(backend: &dyn ChatBackend, frame: &FrameInput, question: &str) -> Result<SpatialLabelRaw> {
    require(backend, true, true)?;
    let mut req = ChatRequest::text(prompts::spatial_prompt(question))
        .with_image(frame.image.clone())
        .with_logprobs(TOP_LOGPROBS);
    req.key = Some(CallKey::new(&frame.video_id, Some(frame.frame_index), question, &req));
    let reply = backend.complete(&req)?;

    if has_verdict(&reply.text) {
        if let Some(tok) = verdict_token(&reply.tokens) {
            let (p_true, p_false) = verdict_mass(tok);
            return Ok(SpatialLabelRaw {
                frame_index: frame.frame_index,
                p_true,
                p_false,
                fallback_used: false,
                response: reply.text,
            });
        }
        if reply.tokens.is_empty() {
            return Err(Error::Backend {
                message: "reply carries no token logprobs".into(),
                retryable: false,
            });
        }
    }

    // no usable verdict: append the evaluation and read its distribution
    let body = reply.text.trim_end();
    let sep = if body.is_empty() { "" } else { "\n" };
    let mut forced = req.clone();
    forced.assistant_prefix = Some(format!("{body}{sep}{EVAL_MARKER}"));
    forced.max_tokens = 1;
    forced.key = Some(CallKey::new(&frame.video_id, Some(frame.frame_index), question, &forced));
    let cont = backend.complete(&forced)?;
    let tok = cont.tokens.first().ok_or_else(|| Error::Backend {
        message: "forced continuation returned no tokens".into(),
        retryable: false,
    })?;
    let (p_true, p_false) = verdict_mass(tok);
    Ok(SpatialLabelRaw {
        frame_index: frame.frame_index,
        p_true,
        p_false,
        fallback_used: true,
        response: format!("{body}{sep}{FALLBACK_SUFFIX}"),
    })
}

/// Scores every frame with at most `limit` requests in flight.
pub fn spatial_label_frames(
    backend: &dyn ChatBackend,
    frames: &[FrameInput],
    question: &str,
    exec: Exec,
    limit: usize,
) -> Result<Vec<SpatialLabelRaw>> {
    bounded_map(exec, limit, frames, |f| spatial_score_frame(backend, f, question))
        .into_iter()
        .collect()
}

pub fn caption_frames(backend: &dyn ChatBackend, frames: &[FrameInput], exec: Exec, limit: usize) -> Result<Vec<String>> {
    caption_frames_with(backend, frames, CAPTION_PROMPT, exec, limit)
}

pub fn caption_frames_with(
    backend: &dyn ChatBackend,
    frames: &[FrameInput],
    prompt: &str,
    exec: Exec,
    limit: usize,
) -> Result<Vec<String>> {
    require(backend, true, false)?;
    bounded_map(exec, limit, frames, |f| {
        let mut req = ChatRequest::text(prompt).with_image(f.image.clone());
        req.max_tokens = 64;
        req.key = Some(CallKey::new(&f.video_id, Some(f.frame_index), "", &req));
        let reply = backend.complete(&req)?;
        // captions share a line in the ranking prompt
        let caption = reply.text.split_whitespace().collect::<Vec<_>>().join(" ");
        Ok(if caption.is_empty() { EMPTY_CAPTION.to_string() } else { caption })
    })
    .into_iter()
    .collect()
}

/// Reads a frame list out of a ranking reply. Numbers are 1-based in the
/// reply; out-of-range values and repeats are dropped and at most `want`
/// are kept, in reply order.
pub fn parse_temporal_reply(reply: &str, n: usize, want: usize) -> TemporalLabel {
    static LIST: OnceLock<Regex> = OnceLock::new();
    static INT: OnceLock<Regex> = OnceLock::new();
    let list = LIST.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").expect("static regex"));
    let int = INT.get_or_init(|| Regex::new(r"-?\d+").expect("static regex"));
    let (body, parse_ok) = match list.captures(reply) {
        Some(c) => (c.get(1).map_or("", |m| m.as_str()), true),
        None => (reply, false),
    };
    let mut picked: Vec<usize> = Vec::new();
    for m in int.find_iter(body) {
        if picked.len() == want {
            break;
        }
        let Ok(v) = m.as_str().parse::<i64>() else { continue };
        if v < 1 || v as u64 > n as u64 {
            continue;
        }
        let idx = (v - 1) as usize;
        if !picked.contains(&idx) {
            picked.push(idx);
        }
    }
    picked.sort_unstable();
    TemporalLabel {
        helpful_set: picked,
        parse_ok,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalOutcome {
    pub label: TemporalLabel,
    pub prompt: String,
    pub reply: String,
}

pub fn temporal_rank(
    backend: &dyn ChatBackend,
    video_id: &str,
    captions: &[String],
    question: &str,
    want: usize,
) -> Result<TemporalOutcome> {
    if captions.is_empty() {
        return Err(Error::domain("temporal ranking needs at least one caption"));
    }
    let prompt = prompts::temporal_prompt(question, captions, want);
    let mut req = ChatRequest::text(prompt.clone());
    req.max_tokens = 128;
    req.key = Some(CallKey::new(video_id, None, question, &req));
    let reply = backend.complete(&req)?;
    Ok(TemporalOutcome {
        label: parse_temporal_reply(&reply.text, captions.len(), want),
        prompt,
        reply: reply.text,
    })
}

#[cfg(test)]
mod tests;
