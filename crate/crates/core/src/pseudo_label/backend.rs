use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::frame_model::TokenGrid;

pub const GRID_MIME: &str = "application/x-framesel-grid";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    MockDeterministic,
    HttpChat,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_images: bool,
    pub supports_token_logprobs: bool,
}

/// An image attached to a request, already encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub mime: String,
    pub data_base64: String,
}

impl ImagePayload {
    pub fn new(mime: impl Into<String>, bytes: &[u8]) -> Self {
        ImagePayload {
            mime: mime.into(),
            data_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    /// Feature grids travel as `side`, `dim` (u32 LE) then f32 LE values.
    pub fn from_grid(grid: &TokenGrid) -> Self {
        let mut bytes = Vec::with_capacity(8 + grid.values.len() * 4);
        bytes.extend_from_slice(&(grid.side as u32).to_le_bytes());
        bytes.extend_from_slice(&(grid.dim as u32).to_le_bytes());
        for &v in &grid.values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Self::new(GRID_MIME, &bytes)
    }

    pub fn bytes(&self) -> Option<Vec<u8>> {
        base64::engine::general_purpose::STANDARD.decode(&self.data_base64).ok()
    }

    /// Inverse of [`ImagePayload::from_grid`].
    pub fn to_grid(&self) -> Option<(usize, usize, Vec<f64>)> {
        if self.mime != GRID_MIME {
            return None;
        }
        let bytes = self.bytes()?;
        if bytes.len() < 8 {
            return None;
        }
        let side = u32::from_le_bytes(bytes[0..4].try_into().ok()?) as usize;
        let dim = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
        let body = &bytes[8..];
        if body.len() != side * side * dim * 4 {
            return None;
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Some((side, dim, values))
    }
}

/// Idempotency key for a backend call.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallKey {
    pub video_id: String,
    /// `None` for whole-video calls.
    pub frame_index: Option<usize>,
    pub question_hash: String,
    pub prompt_hash: String,
}

impl CallKey {
    pub fn new(video_id: &str, frame_index: Option<usize>, question: &str, request: &ChatRequest) -> Self {
        let mut h = Sha256::new();
        h.update(request.prompt.as_bytes());
        h.update([0]);
        if let Some(p) = &request.assistant_prefix {
            h.update(p.as_bytes());
        }
        CallKey {
            video_id: video_id.to_string(),
            frame_index,
            question_hash: short_hash(question.as_bytes()),
            prompt_hash: hex(&h.finalize()),
        }
    }

    pub fn digest(&self) -> String {
        let frame = self.frame_index.map_or("ALL".to_string(), |f| f.to_string());
        let joined = format!("{}\u{1f}{frame}\u{1f}{}\u{1f}{}", self.video_id, self.question_hash, self.prompt_hash);
        short_hash(joined.as_bytes())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    #[serde(default)]
    pub images: Vec<ImagePayload>,
    /// Text the assistant turn is forced to start with; the reply continues it.
    #[serde(default)]
    pub assistant_prefix: Option<String>,
    pub logprobs: bool,
    pub top_logprobs: usize,
    pub max_tokens: usize,
    #[serde(default)]
    pub key: Option<CallKey>,
}

impl ChatRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        ChatRequest {
            prompt: prompt.into(),
            images: Vec::new(),
            assistant_prefix: None,
            logprobs: false,
            top_logprobs: 0,
            max_tokens: 512,
            key: None,
        }
    }

    pub fn with_image(mut self, image: ImagePayload) -> Self {
        self.images.push(image);
        self
    }

    pub fn with_logprobs(mut self, top: usize) -> Self {
        self.logprobs = true;
        self.top_logprobs = top;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Generated tokens in order; empty when logprobs were not requested.
    #[serde(default)]
    pub tokens: Vec<TokenLogprob>,
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn capabilities(&self) -> Capabilities;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        (**self).complete(request)
    }
}
