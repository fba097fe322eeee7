//! Chat-completions client over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::{BackendKind, Capabilities, ChatBackend, ChatRequest, ChatResponse, TokenLogprob, TopLogprob};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL up to, not including, `/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "yes")]
    pub supports_images: bool,
    #[serde(default = "yes")]
    pub supports_logprobs: bool,
}

fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn yes() -> bool {
    true
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    #[cfg(feature = "http")]
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.base_url.trim().is_empty() {
            return Err(Error::config("http backend needs base_url"));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| Error::config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        #[cfg(feature = "http")]
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            config,
            api_key,
            #[cfg(feature = "http")]
            agent,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    #[cfg(feature = "http")]
    fn post_once(&self, body: &Value) -> Result<Value> {
        let mut req = self.agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Error::Backend {
            message: format!("transport: {e}"),
            retryable: true,
        })?;
        let status = resp.status().as_u16();
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Error::Backend {
                message: format!("HTTP {status}: {}", text.chars().take(300).collect::<String>()),
                retryable: status == 429 || status >= 500,
            });
        }
        resp.body_mut().read_json::<Value>().map_err(|e| Error::Backend {
            message: format!("unreadable response body: {e}"),
            retryable: false,
        })
    }

    #[cfg(not(feature = "http"))]
    fn post_once(&self, _body: &Value) -> Result<Value> {
        let _ = &self.api_key;
        Err(Error::config(format!("built without the `http` feature, cannot reach {}", self.url())))
    }
}

/// JSON body for a chat-completions request.
pub fn request_body(model: &str, request: &ChatRequest) -> Value {
    let mut content = vec![json!({"type": "text", "text": request.prompt})];
    for img in &request.images {
        content.push(json!({
            "type": "image_url",
            "image_url": {"url": format!("data:{};base64,{}", img.mime, img.data_base64)}
        }));
    }
    let mut messages = vec![json!({"role": "user", "content": content})];
    if let Some(prefix) = &request.assistant_prefix {
        messages.push(json!({"role": "assistant", "content": prefix}));
    }
    let mut body = json!({
        "model": model,
        "messages": messages,
        "max_tokens": request.max_tokens,
        "temperature": 0,
    });
    if request.logprobs {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(request.top_logprobs);
    }
    body
}

/// Extracts text and per-token logprobs from a chat-completions response.
pub fn parse_response(body: &Value) -> Result<ChatResponse> {
    let bad = |what: &str| Error::Backend {
        message: format!("malformed response: {what}"),
        retryable: false,
    };
    let choice = body.get("choices").and_then(|c| c.get(0)).ok_or_else(|| bad("no choices"))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("no message content"))?
        .to_string();
    let mut tokens = Vec::new();
    if let Some(items) = choice.pointer("/logprobs/content").and_then(Value::as_array) {
        for item in items {
            let token = item.get("token").and_then(Value::as_str).ok_or_else(|| bad("token"))?;
            let logprob = item.get("logprob").and_then(Value::as_f64).ok_or_else(|| bad("logprob"))?;
            let top = item
                .get("top_logprobs")
                .and_then(Value::as_array)
                .map(|alts| {
                    alts.iter()
                        .filter_map(|a| {
                            Some(TopLogprob {
                                token: a.get("token")?.as_str()?.to_string(),
                                logprob: a.get("logprob")?.as_f64()?,
                            })
                        })
                        .collect()
                })
                .unwrap_or_default();
            tokens.push(TokenLogprob {
                token: token.to_string(),
                logprob,
                top,
            });
        }
    }
    Ok(ChatResponse { text, tokens })
}

impl ChatBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::HttpChat
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_images: self.config.supports_images,
            supports_token_logprobs: self.config.supports_logprobs,
        }
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let body = request_body(&self.config.model, request);
        let mut attempt = 0;
        loop {
            match self.post_once(&body) {
                Ok(v) => return parse_response(&v),
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << attempt.min(10));
                    log::warn!("backend call failed ({e}); retry {} in {wait} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
