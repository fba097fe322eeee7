//! Deterministic stand-in for a multimodal chat model.
//!
//! Relevance of a frame is the projection of its mean feature vector onto a
//! fixed signal pattern, measured in units of the pattern's own norm. Spatial replies expose True/False logprobs derived
//! from that relevance, captions mention the queried object when the frame
//! is relevant, and the ranking reply lists the frames whose captions do.

use regex::Regex;
use std::sync::OnceLock;

use super::backend::{
    short_hash, BackendKind, Capabilities, ChatBackend, ChatRequest, ChatResponse, TokenLogprob, TopLogprob,
};
use super::prompts::EVAL_MARKER;
use crate::error::{Error, Result};

const RELEVANT_CAPTION: &str = "queried object";

#[derive(Debug, Clone, PartialEq)]
pub struct MockBackend {
    pub seed: u64,
    /// Unit direction of the signal pattern.
    pattern: Vec<f64>,
    strength: f64,
    /// Relative projection at which `p_true = p_false`.
    pub threshold: f64,
    pub gain: f64,
    /// Half-width of the seeded jitter added to the cosine.
    pub jitter: f64,
}

impl MockBackend {
    pub fn new(seed: u64, pattern: Vec<f64>) -> Result<Self> {
        let norm = pattern.iter().map(|v| v * v).sum::<f64>().sqrt();
        if pattern.is_empty() || !(norm.is_finite() && norm > 0.0) {
            return Err(Error::config("mock backend needs a nonzero signal pattern"));
        }
        Ok(MockBackend {
            seed,
            pattern: pattern.iter().map(|v| v / norm).collect(),
            strength: norm,
            threshold: 0.5,
            gain: 12.0,
            jitter: 0.02,
        })
    }

    pub fn pattern(&self) -> &[f64] {
        &self.pattern
    }

    /// Probability of "True" for a frame grid, or `None` if the request
    /// carries no readable grid.
    pub fn relevance(&self, request: &ChatRequest) -> Option<f64> {
        let (side, dim, values) = request.images.first()?.to_grid()?;
        if dim != self.pattern.len() || side == 0 {
            return None;
        }
        let mut mean = vec![0.0; dim];
        for token in values.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(token) {
                *m += v;
            }
        }
        let tokens = (values.len() / dim).max(1) as f64;
        let along = mean.iter().zip(&self.pattern).map(|(a, b)| a * b).sum::<f64>() / (tokens * self.strength);
        let h = short_hash(format!("{}|{}|{}", self.seed, request.prompt, request.images[0].data_base64).as_bytes());
        let u = u64::from_str_radix(&h[..12], 16).expect("hex") as f64 / (1u64 << 48) as f64;
        let along = along + self.jitter * (2.0 * u - 1.0);
        Some(1.0 / (1.0 + (-self.gain * (along - self.threshold)).exp()))
    }

    fn spatial_reply(&self, q: f64, top: usize) -> ChatResponse {
        let verdict = if q >= 0.5 { "True" } else { "False" };
        let reason = if q >= 0.5 {
            "The frame shows the object the question asks about."
        } else {
            "The frame does not show anything the question asks about."
        };
        let text = format!("{reason}\n{EVAL_MARKER} {verdict}");
        let mut tokens = tokenize(&text);
        let marker_end = text.rfind(EVAL_MARKER).expect("marker") + EVAL_MARKER.len();
        let mut offset = 0;
        for t in tokens.iter_mut() {
            let start = offset;
            offset += t.token.len();
            if start >= marker_end {
                let dist = verdict_distribution(q, top);
                t.logprob = dist.iter().find(|d| d.token == t.token).map_or(f64::NEG_INFINITY, |d| d.logprob);
                t.top = dist;
                break;
            }
        }
        ChatResponse { text, tokens }
    }
}

/// Logprobs over the verdict token, with case and spacing variants.
fn verdict_distribution(q: f64, top: usize) -> Vec<TopLogprob> {
    let q = q.clamp(1e-9, 1.0 - 1e-9);
    let mass = 0.97;
    let mut d = vec![
        TopLogprob {
            token: " True".into(),
            logprob: (mass * q * 0.9).ln(),
        },
        TopLogprob {
            token: "True".into(),
            logprob: (mass * q * 0.1).ln(),
        },
        TopLogprob {
            token: " False".into(),
            logprob: (mass * (1.0 - q) * 0.9).ln(),
        },
        TopLogprob {
            token: " false".into(),
            logprob: (mass * (1.0 - q) * 0.1).ln(),
        },
        TopLogprob {
            token: " Maybe".into(),
            logprob: (1.0f64 - mass).ln(),
        },
    ];
    d.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    d.truncate(top.max(1));
    d
}

/// Splits text into word-like tokens that carry their leading whitespace;
/// colons are tokens of their own.
pub(crate) fn tokenize(text: &str) -> Vec<TokenLogprob> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\s*[^\s:]+|\s*:|\s+$").expect("static regex"));
    re.find_iter(text)
        .map(|m| TokenLogprob {
            token: m.as_str().to_string(),
            logprob: 0.0,
            top: Vec::new(),
        })
        .collect()
}

fn temporal_reply(prompt: &str) -> String {
    static LINE: OnceLock<Regex> = OnceLock::new();
    static WANT: OnceLock<Regex> = OnceLock::new();
    let line = LINE.get_or_init(|| Regex::new(r"(?m)^Frame (\d+) : (.*)$").expect("static regex"));
    let want = WANT.get_or_init(|| Regex::new(r"provide a list of (\d+) frames").expect("static regex"));
    let want: usize = want
        .captures(prompt)
        .and_then(|c| c[1].parse().ok())
        .unwrap_or(8);
    let picks: Vec<String> = line
        .captures_iter(prompt)
        .filter(|c| c[2].contains(RELEVANT_CAPTION))
        .map(|c| c[1].to_string())
        .take(want)
        .collect();
    format!("[{}]", picks.join(", "))
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::MockDeterministic
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_images: true,
            supports_token_logprobs: true,
        }
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        if request.images.is_empty() {
            let text = temporal_reply(&request.prompt);
            return Ok(ChatResponse {
                tokens: if request.logprobs { tokenize(&text) } else { Vec::new() },
                text,
            });
        }
        let q = self
            .relevance(request)
            .ok_or_else(|| Error::domain("mock backend could not read the attached feature grid"))?;
        // anything image-bearing that does not ask for a verdict is a caption request
        if !request.prompt.contains(EVAL_MARKER) && request.assistant_prefix.is_none() {
            let text = if q >= 0.5 {
                format!("A close view of the {RELEVANT_CAPTION} in the scene.")
            } else {
                "A wide view of an ordinary scene.".to_string()
            };
            return Ok(ChatResponse { text, tokens: Vec::new() });
        }
        if let Some(prefix) = &request.assistant_prefix {
            if prefix.trim_end().ends_with(EVAL_MARKER) {
                let dist = verdict_distribution(q, request.top_logprobs);
                let first = dist[0].clone();
                return Ok(ChatResponse {
                    text: first.token.clone(),
                    tokens: vec![TokenLogprob {
                        token: first.token,
                        logprob: first.logprob,
                        top: dist,
                    }],
                });
            }
        }
        let mut reply = self.spatial_reply(q, request.top_logprobs);
        if !request.logprobs {
            reply.tokens.clear();
        }
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_concatenate_to_text() {
        let text = "The frame shows it.\nEvaluation: True";
        let joined: String = tokenize(text).into_iter().map(|t| t.token).collect();
        assert_eq!(joined, text);
    }

    #[test]
    fn temporal_reply_lists_marked_frames() {
        let prompt = "Please provide a list of 2 frames\nFrame 1 : plain\nFrame 2 : the queried object here\n\
                      Frame 3 : the queried object again\nFrame 4 : queried object";
        assert_eq!(temporal_reply(prompt), "[2, 3]");
    }
}
