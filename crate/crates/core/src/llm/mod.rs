//! Chat-completion providers, prompt rendering and response parsing.

mod parse;
mod prompt;
mod providers;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use parse::{parse_response, Answer, ParsedResponse, EMPTY_REASON};
pub use prompt::{render_prompt, CotTrigger, PromptBundle, PromptMode};
pub use providers::{
    OpenAiChatProvider, RateLimiter, RecordingProvider, ReplayProvider, ResilientProvider,
    ScriptRule, ScriptedProvider, SessionEntry,
};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no chat turns to send")]
    EmptyTurns,
    #[error("query text is empty")]
    EmptyQuery,
    #[error("{0}")]
    InvalidPrompt(String),
    #[error("script exhausted{}", .query_id.map(|q| format!(" for query {q}")).unwrap_or_default())]
    ScriptExhausted { query_id: Option<usize> },
    #[error("replay miss: no recorded response for request hash {request_hash}")]
    ReplayMiss { request_hash: String },
    #[error("transient provider failure: {message}")]
    Transient {
        message: String,
        retry_after: Option<Duration>,
    },
    #[error("provider failed after {attempts} attempt(s): {message}")]
    RetriesExhausted { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("prompt exceeds the model context length: {0}")]
    ContextLength(String),
    #[error("provider rejected the request ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("session file {path}: {message}")]
    Session { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_id: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    pub top_p: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model_id: "gpt-3.5-turbo".into(),
            temperature: 0.7,
            max_tokens: Some(512),
            top_p: 1.0,
        }
    }
}

/// One chat completion call. `query_id` is routing context for scripted
/// providers and never goes on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub turns: Vec<ChatTurn>,
    pub params: GenerationParams,
    pub query_id: Option<usize>,
}

/// JSON body of a `/chat/completions` request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<ChatTurn>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
}

impl ChatRequest {
    pub fn new(turns: Vec<ChatTurn>, params: GenerationParams) -> Self {
        Self {
            turns,
            params,
            query_id: None,
        }
    }

    pub fn for_query(mut self, query_id: usize) -> Self {
        self.query_id = Some(query_id);
        self
    }

    pub fn wire(&self) -> WireRequest {
        WireRequest {
            model: self.params.model_id.clone(),
            messages: self.turns.clone(),
            temperature: self.params.temperature,
            max_tokens: self.params.max_tokens,
            top_p: (self.params.top_p != 1.0).then_some(self.params.top_p),
        }
    }

    /// SHA-256 of the serialized wire request; the record/replay key.
    pub fn hash(&self) -> String {
        let body = serde_json::to_string(&self.wire()).expect("wire request serializes");
        hex::encode(Sha256::digest(body.as_bytes()))
    }

    /// All turn contents joined by blank lines; what scripted rules match against.
    pub fn prompt_text(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for std::sync::Arc<P> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

/// Send `turns` through `provider` and return the assistant text.
pub fn complete(
    provider: &dyn ChatProvider,
    turns: &[ChatTurn],
    params: &GenerationParams,
) -> Result<String, LlmError> {
    if turns.is_empty() {
        return Err(LlmError::EmptyTurns);
    }
    provider.complete(&ChatRequest::new(turns.to_vec(), params.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_query_id_but_not_content() {
        let p = GenerationParams::default();
        let a = ChatRequest::new(vec![ChatTurn::user("hi")], p.clone());
        let b = a.clone().for_query(7);
        let c = ChatRequest::new(vec![ChatTurn::user("hi!")], p);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn wire_format_fields() {
        let req = ChatRequest::new(vec![ChatTurn::user("q")], GenerationParams::default());
        let v = serde_json::to_value(req.wire()).unwrap();
        assert_eq!(v["model"], "gpt-3.5-turbo");
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"], "q");
        assert_eq!(v["temperature"], 0.7);
        assert_eq!(v["max_tokens"], 512);
        assert!(v.get("top_p").is_none());
    }

    #[test]
    fn complete_rejects_empty_turns() {
        let p = ScriptedProvider::from_queue(["X"]);
        assert!(matches!(complete(&p, &[], &GenerationParams::default()), Err(LlmError::EmptyTurns)));
    }
}
