//! Chat-completion gateway: a uniform interface over a remote HTTP endpoint
//! and a deterministic scripted mock, with retries and a bound on the number
//! of in-flight requests.
//!
//! The wire protocol mirrors the de-facto chat-completions shape: the POST
//! body is `{"model","messages":[{"role","content"}],"temperature"}` and the
//! assistant text is read from `choices[0].message.content`.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the API key for HTTP backends.
pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("mock script has no entry for role card `{role_card}` turn {turn}")]
    MockScriptMiss { role_card: String, turn: u32 },
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A chat-completion request. Temperature defaults to 0 so runs against a
/// remote model stay as reproducible as the provider allows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
        }
    }

    /// Threads a new user message onto a prior conversation, preserving order.
    pub fn with_history(
        model: impl Into<String>,
        prior: &[ChatMessage],
        new_user: impl Into<String>,
    ) -> Self {
        let mut messages = prior.to_vec();
        messages.push(ChatMessage::user(new_user));
        ChatRequest::new(model, messages)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        for m in &self.messages {
            if m.role != Role::Assistant && m.content.is_empty() {
                return Err(GatewayError::InvalidRequest(format!(
                    "{:?} message with empty content",
                    m.role
                )));
            }
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Identifies one scripted call: which role card is speaking and how many
/// calls that role has already made within the current conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallKey<'a> {
    pub role_card: &'a str,
    pub turn: u32,
}

impl<'a> CallKey<'a> {
    pub fn new(role_card: &'a str, turn: u32) -> Self {
        CallKey { role_card, turn }
    }
}

/// A backend that can answer chat-completion requests.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, key: CallKey<'_>, req: &ChatRequest) -> Result<String, GatewayError>;
}

/// Scripted responses keyed by `(role_card, turn)`. The script is immutable,
/// so lookups are safe under concurrent reads and replies are byte-identical
/// across runs.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    entries: HashMap<(String, u32), String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptLine {
    role_card: String,
    turn: u32,
    response: String,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, role_card: impl Into<String>, turn: u32, response: impl Into<String>) {
        self.entries
            .insert((role_card.into(), turn), response.into());
    }

    pub fn from_entries<I, S, R>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, u32, R)>,
        S: Into<String>,
        R: Into<String>,
    {
        let mut script = MockScript::new();
        for (card, turn, response) in entries {
            script.insert(card, turn, response);
        }
        script
    }

    /// Loads a transcript file: JSONL lines `{"role_card","turn","response"}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let file = std::fs::File::open(path)?;
        let mut script = MockScript::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScriptLine = serde_json::from_str(&line).map_err(|e| {
                GatewayError::MalformedResponse(format!("script line {}: {e}", idx + 1))
            })?;
            script.insert(parsed.role_card, parsed.turn, parsed.response);
        }
        Ok(script)
    }

    pub fn get(&self, key: CallKey<'_>) -> Option<&str> {
        self.entries
            .get(&(key.role_card.to_owned(), key.turn))
            .map(String::as_str)
    }
}

/// Deterministic backend that replays a [`MockScript`]. A missing entry is a
/// hard error so tests never pass on silent fallbacks.
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { script }
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, key: CallKey<'_>, _req: &ChatRequest) -> Result<String, GatewayError> {
        self.script
            .get(key)
            .map(str::to_owned)
            .ok_or_else(|| GatewayError::MockScriptMiss {
                role_card: key.role_card.to_owned(),
                turn: key.turn,
            })
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Debug, Deserialize)]
struct CompletionMessage {
    content: String,
}

/// Checks that an endpoint parses as a URL before any request is attempted.
pub fn validate_endpoint(endpoint: &str) -> Result<(), GatewayError> {
    reqwest::Url::parse(endpoint)
        .map(|_| ())
        .map_err(|e| GatewayError::InvalidRequest(format!("endpoint `{endpoint}`: {e}")))
}

/// HTTP backend speaking the chat-completions protocol. The API key is read
/// from the environment on every call and never stored or logged.
pub struct HttpBackend {
    endpoint: String,
    api_key_env: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpBackend::with_key_env(endpoint, API_KEY_ENV)
    }

    pub fn with_key_env(endpoint: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        HttpBackend {
            endpoint: endpoint.into(),
            api_key_env: api_key_env.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("reqwest client"),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, _key: CallKey<'_>, req: &ChatRequest) -> Result<String, GatewayError> {
        let api_key = std::env::var(&self.api_key_env)
            .map_err(|_| GatewayError::MissingApiKey(self.api_key_env.clone()))?;
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(api_key)
            .json(req)
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;

        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(GatewayError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(GatewayError::MalformedResponse(format!("HTTP {status}")));
        }
        let parsed: CompletionResponse = response
            .json()
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| GatewayError::MalformedResponse("response has no choices".into()))
    }
}

/// Retry behaviour for transient failures: `retries` additional attempts with
/// exponential backoff `base_delay * 2^k`.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 2,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
struct InFlightLimiter {
    max: usize,
    current: Mutex<usize>,
    cond: Condvar,
}

impl InFlightLimiter {
    fn new(max: usize) -> Self {
        InFlightLimiter {
            max: max.max(1),
            current: Mutex::new(0),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> usize {
        let mut current = self.current.lock().expect("limiter poisoned");
        while *current >= self.max {
            current = self.cond.wait(current).expect("limiter poisoned");
        }
        *current += 1;
        *current
    }

    fn release(&self) {
        let mut current = self.current.lock().expect("limiter poisoned");
        *current -= 1;
        self.cond.notify_one();
    }
}

/// Shareable front door to a chat backend: validates requests, bounds the
/// number of in-flight calls, and retries transient failures.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    retry: RetryPolicy,
    limiter: InFlightLimiter,
    high_water: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Gateway {
            backend,
            retry,
            limiter: InFlightLimiter::new(max_in_flight),
            high_water: AtomicUsize::new(0),
        }
    }

    pub fn mock(script: MockScript) -> Self {
        Gateway::new(Box::new(MockBackend::new(script)), RetryPolicy::default(), 4)
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        Gateway::new(Box::new(HttpBackend::new(endpoint)), RetryPolicy::default(), 4)
    }

    /// Completes a request, retrying transient failures with exponential
    /// backoff. Non-transient errors (script misses, bad requests) surface
    /// immediately.
    pub fn complete(&self, key: CallKey<'_>, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let in_flight = self.limiter.acquire();
        self.high_water.fetch_max(in_flight, Ordering::SeqCst);
        let result = self.complete_with_retries(key, req);
        self.limiter.release();
        result
    }

    fn complete_with_retries(
        &self,
        key: CallKey<'_>,
        req: &ChatRequest,
    ) -> Result<String, GatewayError> {
        let attempts = self.retry.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.backend.complete(key, req) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() => {
                    last = e.to_string();
                    if attempt + 1 < attempts {
                        std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(GatewayError::BackendUnavailable { attempts, last })
    }

    /// Highest number of simultaneously outstanding requests seen so far.
    pub fn max_in_flight_observed(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;
    use std::sync::Arc;

    fn request() -> ChatRequest {
        ChatRequest::new("test-model", vec![ChatMessage::user("hi")])
    }

    #[test]
    fn mock_returns_scripted_response() {
        let gw = Gateway::mock(MockScript::from_entries([("director", 0, "PASS")]));
        let out = gw.complete(CallKey::new("director", 0), &request()).unwrap();
        assert_eq!(out, "PASS");
    }

    #[test]
    fn mock_miss_is_a_hard_error() {
        let gw = Gateway::mock(MockScript::from_entries([("director", 0, "x")]));
        match gw.complete(CallKey::new("director", 2), &request()) {
            Err(GatewayError::MockScriptMiss { role_card, turn }) => {
                assert_eq!(role_card, "director");
                assert_eq!(turn, 2);
            }
            other => panic!("expected script miss, got {other:?}"),
        }
    }

    #[test]
    fn mock_is_deterministic_across_runs() {
        let script = MockScript::from_entries([("a", 0, "one"), ("a", 1, "two")]);
        let run = || {
            let gw = Gateway::mock(script.clone());
            let mut replies = Vec::new();
            for turn in 0..2 {
                replies.push(gw.complete(CallKey::new("a", turn), &request()).unwrap());
            }
            replies
        };
        assert_eq!(run(), run());
    }

    struct FlakyBackend {
        calls: Arc<AtomicU32>,
        fail_first: u32,
    }

    impl ChatBackend for FlakyBackend {
        fn complete(&self, _key: CallKey<'_>, _req: &ChatRequest) -> Result<String, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(GatewayError::Transport("connection reset".into()))
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn transient_failures_are_retried() {
        let calls = Arc::new(AtomicU32::new(0));
        let backend = FlakyBackend {
            calls: calls.clone(),
            fail_first: 2,
        };
        let gw = Gateway::new(
            Box::new(backend),
            RetryPolicy {
                retries: 2,
                base_delay: Duration::from_millis(1),
            },
            4,
        );
        assert_eq!(gw.complete(CallKey::new("r", 0), &request()).unwrap(), "ok");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_report_attempt_count() {
        let calls = Arc::new(AtomicU32::new(0));
        let backend = FlakyBackend {
            calls: calls.clone(),
            fail_first: u32::MAX,
        };
        let gw = Gateway::new(
            Box::new(backend),
            RetryPolicy {
                retries: 2,
                base_delay: Duration::from_millis(1),
            },
            4,
        );
        match gw.complete(CallKey::new("r", 0), &request()) {
            Err(GatewayError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected unavailable, got {other:?}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn unreachable_http_endpoint_exhausts_retries() {
        // Nothing listens on this port; connection is refused immediately.
        let backend = HttpBackend::with_key_env("http://127.0.0.1:9/v1/chat/completions", "PATH");
        let gw = Gateway::new(
            Box::new(backend),
            RetryPolicy {
                retries: 2,
                base_delay: Duration::from_millis(1),
            },
            4,
        );
        match gw.complete(CallKey::new("r", 0), &request()) {
            Err(GatewayError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected unavailable, got {other:?}"),
        }
    }

    #[test]
    fn with_history_appends_in_order() {
        let req = ChatRequest::with_history("m", &[], "hi");
        assert_eq!(req.messages.len(), 1);
        assert_eq!(req.messages[0].role, Role::User);

        let prior = vec![ChatMessage::system("sys")];
        let req = ChatRequest::with_history("m", &prior, "q");
        assert_eq!(req.messages.len(), 2);
        assert_eq!(req.messages[0].role, Role::System);
        assert_eq!(req.messages[1].content, "q");
    }

    #[test]
    fn request_serialization_is_stable() {
        let req = ChatRequest::with_history("m", &[ChatMessage::system("s")], "q");
        let a = serde_json::to_string(&req).unwrap();
        let b = serde_json::to_string(&req).unwrap();
        assert_eq!(a, b);
        let back: ChatRequest = serde_json::from_str(&a).unwrap();
        assert_eq!(back, req);
    }

    #[test]
    fn temperature_defaults_to_zero_and_lands_in_payload() {
        let req = request();
        assert_eq!(req.temperature, 0.0);
        let payload: serde_json::Value = serde_json::to_value(&req).unwrap();
        assert_eq!(payload["temperature"], serde_json::json!(0.0));
        assert_eq!(payload["messages"][0]["role"], "user");
    }

    #[test]
    fn empty_user_content_is_rejected() {
        let req = ChatRequest::new("m", vec![ChatMessage::user("")]);
        assert!(matches!(
            req.validate(),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    struct SlowBackend {
        concurrent: Arc<AtomicU32>,
        peak: Arc<AtomicU32>,
    }

    impl ChatBackend for SlowBackend {
        fn complete(&self, _key: CallKey<'_>, _req: &ChatRequest) -> Result<String, GatewayError> {
            let now = self.concurrent.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(10));
            self.concurrent.fetch_sub(1, Ordering::SeqCst);
            Ok("ok".into())
        }
    }

    #[test]
    fn in_flight_requests_stay_bounded() {
        let concurrent = Arc::new(AtomicU32::new(0));
        let peak = Arc::new(AtomicU32::new(0));
        let backend = SlowBackend {
            concurrent: concurrent.clone(),
            peak: peak.clone(),
        };
        let gw = Arc::new(Gateway::new(Box::new(backend), RetryPolicy::default(), 3));

        let mut handles = Vec::new();
        for _ in 0..12 {
            let gw = gw.clone();
            handles.push(std::thread::spawn(move || {
                gw.complete(CallKey::new("r", 0), &request()).unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert!(gw.max_in_flight_observed() <= 3);
        assert!(gw.max_in_flight_observed() >= 1);
    }

    #[test]
    fn endpoint_validation() {
        assert!(validate_endpoint("https://api.example.com/v1/chat/completions").is_ok());
        assert!(validate_endpoint("not a url").is_err());
    }

    #[test]
    fn script_loads_from_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        std::fs::write(
            &path,
            "{\"role_card\":\"evaluator\",\"turn\":0,\"response\":\"PASS\"}\n",
        )
        .unwrap();
        let script = MockScript::load(&path).unwrap();
        assert_eq!(script.get(CallKey::new("evaluator", 0)), Some("PASS"));
    }
}
