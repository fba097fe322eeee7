use std::collections::VecDeque;
use std::sync::Mutex;

use super::backend::{BackendKind, Capabilities, ChatBackend, ChatRequest, ChatResponse};
use crate::error::{Error, Result};

/// Replays canned responses in order and records every request.
#[derive(Debug)]
pub struct ScriptedBackend {
    capabilities: Capabilities,
    replies: Mutex<VecDeque<ChatResponse>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(replies: Vec<ChatResponse>) -> Self {
        ScriptedBackend {
            capabilities: Capabilities {
                supports_images: true,
                supports_token_logprobs: true,
            },
            replies: Mutex::new(replies.into()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn with_capabilities(mut self, capabilities: Capabilities) -> Self {
        self.capabilities = capabilities;
        self
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().expect("poisoned").clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        self.seen.lock().expect("poisoned").push(request.clone());
        self.replies.lock().expect("poisoned").pop_front().ok_or_else(|| Error::Backend {
            message: "script exhausted".into(),
            retryable: false,
        })
    }
}
