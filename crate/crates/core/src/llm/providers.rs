//! Chat providers: OpenAI-compatible HTTP, retry/rate-limit wrapper, scripted
//! replies for offline runs, and session record/replay.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, LlmError, WireRequest};
use crate::http::{self, RetryPolicy};

/// Client for `POST {base_url}/chat/completions`. One attempt per call; wrap
/// in [`ResilientProvider`] for retries.
pub struct OpenAiChatProvider {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

impl OpenAiChatProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key,
            agent: http::agent(Duration::from_secs(300)),
        }
    }
}

fn is_context_overflow(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded")
        || lower.contains("maximum context length")
        || lower.contains("context length")
        || lower.contains("too many tokens")
}

impl ChatProvider for OpenAiChatProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        if request.turns.is_empty() {
            return Err(LlmError::EmptyTurns);
        }
        let url = http::join_url(&self.base_url, "chat/completions");
        let reply = http::post_json(&self.agent, &url, self.api_key.as_deref(), &request.wire())
            .map_err(|message| LlmError::Transient {
                message,
                retry_after: None,
            })?;
        match reply.status {
            200..=299 => {}
            401 | 403 => return Err(LlmError::Auth(reply.body)),
            400 | 413 if is_context_overflow(&reply.body) => return Err(LlmError::ContextLength(reply.body)),
            s if http::is_transient_status(s) => {
                return Err(LlmError::Transient {
                    message: format!("HTTP {s}: {}", reply.body),
                    retry_after: reply.retry_after,
                })
            }
            status => {
                return Err(LlmError::Rejected {
                    status,
                    message: reply.body,
                })
            }
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&reply.body).map_err(|e| LlmError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("response has no choices[0].message.content".into()))
    }
}

/// Process-wide token bucket limiting request starts per minute.
pub struct RateLimiter {
    per_second: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    /// `burst` requests may start at once; the bucket refills at `requests_per_minute`.
    pub fn new(requests_per_minute: f64, burst: u32) -> Self {
        let capacity = f64::from(burst.max(1));
        Self {
            per_second: requests_per_minute / 60.0,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Block until a request may start.
    pub fn acquire(&self) {
        let wait = {
            let mut state = self.state.lock();
            let now = Instant::now();
            let (tokens, last) = *state;
            let tokens = (tokens + now.duration_since(last).as_secs_f64() * self.per_second).min(self.capacity);
            let remaining = tokens - 1.0;
            *state = (remaining, now);
            if remaining >= 0.0 {
                Duration::ZERO
            } else {
                Duration::from_secs_f64(-remaining / self.per_second)
            }
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

/// Adds retries with exponential backoff and an optional rate limit to any provider.
pub struct ResilientProvider {
    inner: Arc<dyn ChatProvider>,
    retry: RetryPolicy,
    limiter: Option<Arc<RateLimiter>>,
}

impl ResilientProvider {
    pub fn new(inner: Arc<dyn ChatProvider>, retry: RetryPolicy, limiter: Option<Arc<RateLimiter>>) -> Self {
        Self { inner, retry, limiter }
    }
}

impl ChatProvider for ResilientProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.retry
            .run(
                |_| {
                    if let Some(l) = &self.limiter {
                        l.acquire();
                    }
                    self.inner.complete(request)
                },
                |e| match e {
                    LlmError::Transient { retry_after, .. } => Some(*retry_after),
                    _ => None,
                },
            )
            .map_err(|(e, attempts)| match e {
                LlmError::Transient { message, .. } => LlmError::RetriesExhausted { attempts, message },
                other => other,
            })
    }
}

/// A content-conditional scripted reply. `response` may reference capture
/// groups of `pattern` as `$1`, `${name}`.
#[derive(Debug, Clone)]
pub struct ScriptRule {
    pub pattern: Regex,
    pub response: String,
}

#[derive(Default)]
struct Script {
    per_query: HashMap<usize, VecDeque<String>>,
    shared: VecDeque<String>,
    rules: Vec<ScriptRule>,
}

/// Offline provider replaying canned responses.
///
/// Lookup order per call: the FIFO queue for the request's query id, then the
/// first regex rule matching the prompt text, then the shared FIFO queue.
#[derive(Default)]
pub struct ScriptedProvider {
    script: Mutex<Script>,
    calls: AtomicUsize,
}

#[derive(Deserialize)]
struct FixtureLine {
    response: String,
    #[serde(default)]
    query_id: Option<usize>,
    #[serde(default)]
    pattern: Option<String>,
}

impl ScriptedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_queue<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let p = Self::new();
        for r in responses {
            p.push(r);
        }
        p
    }

    pub fn push(&self, response: impl Into<String>) {
        self.script.lock().shared.push_back(response.into());
    }

    pub fn push_for_query(&self, query_id: usize, response: impl Into<String>) {
        self.script
            .lock()
            .per_query
            .entry(query_id)
            .or_default()
            .push_back(response.into());
    }

    pub fn add_rule(&self, pattern: Regex, response: impl Into<String>) {
        self.script.lock().rules.push(ScriptRule {
            pattern,
            response: response.into(),
        });
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Load a fixture: one JSON object per line with `response` and optionally
    /// `query_id` (per-query queue) or `pattern` (regex rule).
    pub fn from_fixture(path: &Path) -> Result<Self, LlmError> {
        let session_err = |message: String| LlmError::Session {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| session_err(e.to_string()))?;
        let p = Self::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| session_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine =
                serde_json::from_str(&line).map_err(|e| session_err(format!("line {}: {e}", i + 1)))?;
            match (rec.pattern, rec.query_id) {
                (Some(pat), _) => {
                    let re = Regex::new(&pat).map_err(|e| session_err(format!("line {}: {e}", i + 1)))?;
                    p.add_rule(re, rec.response);
                }
                (None, Some(q)) => p.push_for_query(q, rec.response),
                (None, None) => p.push(rec.response),
            }
        }
        Ok(p)
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        if request.turns.is_empty() {
            return Err(LlmError::EmptyTurns);
        }
        let mut script = self.script.lock();
        let reply = request
            .query_id
            .and_then(|q| script.per_query.get_mut(&q))
            .and_then(VecDeque::pop_front)
            .or_else(|| {
                let text = request.prompt_text();
                script.rules.iter().find_map(|rule| {
                    rule.pattern.captures(&text).map(|caps| {
                        let mut out = String::new();
                        caps.expand(&rule.response, &mut out);
                        out
                    })
                })
            })
            .or_else(|| script.shared.pop_front());
        match reply {
            Some(r) => {
                self.calls.fetch_add(1, Ordering::Relaxed);
                Ok(r)
            }
            None => Err(LlmError::ScriptExhausted {
                query_id: request.query_id,
            }),
        }
    }
}

/// One line of a record/replay session file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub request_hash: String,
    pub request: WireRequest,
    pub response_text: String,
}

/// Forwards calls to `inner` and appends each exchange to a session file.
pub struct RecordingProvider {
    inner: Arc<dyn ChatProvider>,
    path: PathBuf,
    sink: Mutex<BufWriter<File>>,
}

impl RecordingProvider {
    pub fn create(inner: Arc<dyn ChatProvider>, path: &Path) -> Result<Self, LlmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Session {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            sink: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl ChatProvider for RecordingProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let response_text = self.inner.complete(request)?;
        let entry = SessionEntry {
            request_hash: request.hash(),
            request: request.wire(),
            response_text: response_text.clone(),
        };
        let line = serde_json::to_string(&entry).expect("session entry serializes");
        let mut sink = self.sink.lock();
        writeln!(sink, "{line}")
            .and_then(|_| sink.flush())
            .map_err(|e| LlmError::Session {
                path: self.path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(response_text)
    }
}

/// Serves responses from a recorded session keyed by request hash. Repeated
/// identical requests are answered in recording order.
pub struct ReplayProvider {
    entries: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayProvider {
    pub fn from_entries(entries: impl IntoIterator<Item = SessionEntry>) -> Self {
        let mut map: HashMap<String, VecDeque<String>> = HashMap::new();
        for e in entries {
            map.entry(e.request_hash).or_default().push_back(e.response_text);
        }
        Self {
            entries: Mutex::new(map),
        }
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let session_err = |message: String| LlmError::Session {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| session_err(e.to_string()))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| session_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str::<SessionEntry>(&line)
                    .map_err(|e| session_err(format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self::from_entries(entries))
    }
}

impl ChatProvider for ReplayProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let request_hash = request.hash();
        self.entries
            .lock()
            .get_mut(&request_hash)
            .and_then(VecDeque::pop_front)
            .ok_or(LlmError::ReplayMiss { request_hash })
    }
}
