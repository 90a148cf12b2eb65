//! Chat-completion providers.
//!
//! Three kinds share the [`LlmProvider`] trait: an OpenAI-compatible HTTP
//! client, a replay provider that answers from fixture files keyed by a digest
//! of the message list, and a scripted provider that pops queued responses.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "CHATVIS_API_KEY";
pub const BASE_URL_ENV: &str = "CHATVIS_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
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

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Stable hex digest of a message list. Depends only on the ordered
/// `(role, content)` pairs.
pub fn messages_digest(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update((m.content.len() as u64).to_le_bytes());
        hasher.update(m.content.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(with = "duration_secs")]
    pub request_timeout: Duration,
    pub max_retries: u32,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            model: "gpt-4".to_string(),
            temperature: 0.2,
            max_tokens: 4096,
            request_timeout: Duration::from_secs(120),
            max_retries: 3,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.model.trim().is_empty() {
            return Err(LlmError::InvalidParams("model name is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidParams("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !(secs.is_finite() && secs >= 0.0) {
            return Err(serde::de::Error::custom("duration must be non-negative"));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    Replay,
    Scripted,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("message list is empty")]
    EmptyMessages,
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("transport error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no replay fixture for digest {digest}")]
    FixtureMiss { digest: String },
    #[error("scripted provider has no responses left")]
    Exhausted,
    #[error("fixture io: {0}")]
    Io(#[from] io::Error),
}

/// A chat-completion backend.
pub trait LlmProvider: Send + Sync {
    fn kind(&self) -> ProviderKind;

    fn complete(&self, messages: &[ChatMessage], params: &ModelParams) -> Result<String, LlmError>;
}

impl<P: LlmProvider + ?Sized> LlmProvider for std::sync::Arc<P> {
    fn kind(&self) -> ProviderKind {
        (**self).kind()
    }

    fn complete(&self, messages: &[ChatMessage], params: &ModelParams) -> Result<String, LlmError> {
        (**self).complete(messages, params)
    }
}

/// Returns queued responses in order.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    queue: Mutex<VecDeque<Result<String, String>>>,
}

impl ScriptedProvider {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_results(responses.into_iter().map(|s| Ok(s.into())))
    }

    /// `Err` entries make the corresponding call fail with a transport error.
    pub fn from_results<I>(responses: I) -> Self
    where
        I: IntoIterator<Item = Result<String, String>>,
    {
        Self {
            queue: Mutex::new(responses.into_iter().collect()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

impl LlmProvider for ScriptedProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Scripted
    }

    fn complete(&self, messages: &[ChatMessage], _params: &ModelParams) -> Result<String, LlmError> {
        if messages.is_empty() {
            return Err(LlmError::EmptyMessages);
        }
        match self.queue.lock().unwrap().pop_front() {
            Some(Ok(text)) => Ok(text),
            Some(Err(message)) => Err(LlmError::Transport { status: None, message }),
            None => Err(LlmError::Exhausted),
        }
    }
}

/// Answers from `<digest>.txt` files in a fixture directory.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    fixtures: HashMap<String, String>,
}

impl ReplayProvider {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, LlmError> {
        let mut fixtures = HashMap::new();
        for entry in fs::read_dir(dir.as_ref())? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            fixtures.insert(stem.to_string(), fs::read_to_string(&path)?);
        }
        Ok(Self { fixtures })
    }

    pub fn from_map(fixtures: HashMap<String, String>) -> Self {
        Self { fixtures }
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl LlmProvider for ReplayProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Replay
    }

    fn complete(&self, messages: &[ChatMessage], _params: &ModelParams) -> Result<String, LlmError> {
        if messages.is_empty() {
            return Err(LlmError::EmptyMessages);
        }
        let digest = messages_digest(messages);
        self.fixtures
            .get(&digest)
            .cloned()
            .ok_or(LlmError::FixtureMiss { digest })
    }
}

/// Wraps another provider and writes every successful exchange as a replay
/// fixture.
pub struct RecordingProvider<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: LlmProvider> RecordingProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }
}

impl<P: LlmProvider> LlmProvider for RecordingProvider<P> {
    fn kind(&self) -> ProviderKind {
        self.inner.kind()
    }

    fn complete(&self, messages: &[ChatMessage], params: &ModelParams) -> Result<String, LlmError> {
        let reply = self.inner.complete(messages, params)?;
        let path = self.dir.join(format!("{}.txt", messages_digest(messages)));
        fs::write(path, &reply)?;
        Ok(reply)
    }
}

/// Retry schedule for the HTTP provider.
#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    /// Fraction of each delay added or removed at random.
    pub jitter: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.25,
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(attempt as i32);
        let spread = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(-self.jitter..=self.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64((nominal * (1.0 + spread)).max(0.0))
    }
}

/// Counting gate that caps in-flight requests.
#[derive(Debug)]
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl Gate {
    fn new(cap: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            cap: cap.max(1),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.in_flight.lock().unwrap() -= 1;
        self.gate.freed.notify_one();
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// OpenAI-compatible `POST {base_url}/v1/chat/completions` client.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    backoff: Backoff,
    gate: Gate,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::Transport {
                status: None,
                message: e.to_string(),
            })?;
        Ok(Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.filter(|k| !k.is_empty()),
            backoff: Backoff::default(),
            gate: Gate::new(4),
        })
    }

    /// Reads `CHATVIS_BASE_URL` and `CHATVIS_API_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Self::new(base, std::env::var(API_KEY_ENV).ok())
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.gate = Gate::new(cap);
        self
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url)
    }

    fn attempt(&self, body: &CompletionRequest<'_>, timeout: Duration) -> Result<String, LlmError> {
        let mut req = self.client.post(self.endpoint()).json(body).timeout(timeout);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport {
            status: e.status().map(|s| s.as_u16()),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(LlmError::Transport {
                status: Some(status.as_u16()),
                message: text,
            });
        }
        let parsed: CompletionResponse = resp.json().map_err(|e| LlmError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("no choices[0].message.content".into()))
    }
}

fn retryable(err: &LlmError) -> bool {
    match err {
        LlmError::Transport { status: Some(code), .. } => *code == 429 || (500..600).contains(code),
        LlmError::Transport { status: None, .. } => true,
        _ => false,
    }
}

impl LlmProvider for HttpProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Http
    }

    fn complete(&self, messages: &[ChatMessage], params: &ModelParams) -> Result<String, LlmError> {
        if messages.is_empty() {
            return Err(LlmError::EmptyMessages);
        }
        params.validate()?;
        let body = CompletionRequest {
            model: &params.model,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        };
        let _slot = self.gate.enter();
        let mut attempt = 0;
        loop {
            match self.attempt(&body, params.request_timeout) {
                Ok(text) => return Ok(text),
                Err(err) if retryable(&err) && attempt < params.max_retries => {
                    let wait = self.backoff.delay(attempt);
                    log::warn!("chat completion failed ({err}); retry {} in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionPath {
    Fenced,
    Bare,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("completion contained no script")]
pub struct EmptyScript;

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Pulls the script out of a completion: the interior of the first fenced
/// block if there is one, otherwise the whole text. Both are trimmed.
pub fn extract_script_text(completion: &str) -> Result<(String, ExtractionPath), EmptyScript> {
    let mut lines = completion.lines();
    let mut found_fence = false;
    for line in lines.by_ref() {
        if is_fence(line) {
            found_fence = true;
            break;
        }
    }
    let (body, path) = if found_fence {
        let interior: Vec<&str> = lines.take_while(|l| !is_fence(l)).collect();
        (interior.join("\n"), ExtractionPath::Fenced)
    } else {
        (completion.to_string(), ExtractionPath::Bare)
    };
    let body = body.trim().to_string();
    if body.is_empty() {
        return Err(EmptyScript);
    }
    Ok((body, path))
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;

    fn msgs() -> Vec<ChatMessage> {
        vec![ChatMessage::system("sys"), ChatMessage::user("make an isosurface")]
    }

    #[test]
    fn scripted_returns_in_order_then_exhausts() {
        let p = ScriptedProvider::new(["A", "B"]);
        let params = ModelParams::default();
        assert_eq!(p.complete(&msgs(), &params).unwrap(), "A");
        assert_eq!(p.complete(&msgs(), &params).unwrap(), "B");
        assert!(matches!(p.complete(&msgs(), &params), Err(LlmError::Exhausted)));
    }

    #[test]
    fn empty_messages_rejected() {
        let p = ScriptedProvider::new(["A"]);
        assert!(matches!(
            p.complete(&[], &ModelParams::default()),
            Err(LlmError::EmptyMessages)
        ));
    }

    #[test]
    fn replay_is_deterministic_and_names_missing_digest() {
        let m = msgs();
        let mut map = HashMap::new();
        map.insert(messages_digest(&m), "reply".to_string());
        let p = ReplayProvider::from_map(map);
        let params = ModelParams::default();
        assert_eq!(p.complete(&m, &params).unwrap(), "reply");
        assert_eq!(p.complete(&m, &params).unwrap(), "reply");
        let other = vec![ChatMessage::user("something else")];
        match p.complete(&other, &params) {
            Err(LlmError::FixtureMiss { digest }) => assert_eq!(digest, messages_digest(&other)),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn recording_then_replay_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RecordingProvider::new(ScriptedProvider::new(["hello"]), dir.path()).unwrap();
        let params = ModelParams::default();
        rec.complete(&msgs(), &params).unwrap();
        let replay = ReplayProvider::load(dir.path()).unwrap();
        assert_eq!(replay.len(), 1);
        assert_eq!(replay.complete(&msgs(), &params).unwrap(), "hello");
    }

    #[test]
    fn digest_depends_on_role_and_content_order() {
        let a = msgs();
        let mut reordered = a.clone();
        reordered.reverse();
        let mut edited = a.clone();
        edited[1].content.push('!');
        let mut recast = a.clone();
        recast[1].role = Role::Assistant;
        let base = messages_digest(&a);
        assert_eq!(base, messages_digest(&a.clone()));
        assert_ne!(base, messages_digest(&reordered));
        assert_ne!(base, messages_digest(&edited));
        assert_ne!(base, messages_digest(&recast));
        // Moving text across a message boundary changes the digest too.
        let split = vec![ChatMessage::user("ab"), ChatMessage::user("c")];
        let moved = vec![ChatMessage::user("a"), ChatMessage::user("bc")];
        assert_ne!(messages_digest(&split), messages_digest(&moved));
    }

    #[test]
    fn model_params_validation() {
        let mut p = ModelParams::default();
        assert_eq!(p.model, "gpt-4");
        assert_eq!(p.temperature, 0.2);
        assert_eq!(p.max_retries, 3);
        p.validate().unwrap();
        p.temperature = 2.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn extract_fenced() {
        let (body, path) = extract_script_text("```python\nfrom paraview.simple import *\n```").unwrap();
        assert_eq!(body, "from paraview.simple import *");
        assert_eq!(path, ExtractionPath::Fenced);
    }

    #[test]
    fn extract_bare() {
        let text = "from paraview.simple import *\nreader = LegacyVTKReader(FileNames=['ml-100.vtk'])";
        let (body, path) = extract_script_text(text).unwrap();
        assert_eq!(body, text);
        assert_eq!(path, ExtractionPath::Bare);
    }

    #[test]
    fn extract_prose_around_fence() {
        let text = "Here is the script:\n\n```python\nContour(Input=r)\nShow()\n```\n\nIt renders an isosurface.\n```\nother()\n```";
        let (body, _) = extract_script_text(text).unwrap();
        assert_eq!(body, "Contour(Input=r)\nShow()");
    }

    #[test]
    fn extract_empty_fence_is_error() {
        assert_eq!(extract_script_text("```python\n```"), Err(EmptyScript));
        assert_eq!(extract_script_text("   \n"), Err(EmptyScript));
    }

    proptest! {
        #[test]
        fn extract_is_idempotent(text in "(```(python)?\n|[a-z()= ]{0,12}\n|\n){0,8}") {
            if let Ok((once, _)) = extract_script_text(&text) {
                let (twice, _) = extract_script_text(&once).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }

    /// Minimal HTTP/1.1 stub: answers each request with the next canned
    /// `(status, body)` and counts requests.
    fn stub_server(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let count = Arc::new(AtomicUsize::new(0));
        let counter = count.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                let mut saw_auth = false;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization: bearer test-key") {
                        saw_auth = true;
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; content_length];
                reader.read_exact(&mut buf).unwrap();
                let req: serde_json::Value = serde_json::from_slice(&buf).unwrap();
                assert_eq!(req["model"], "gpt-4");
                assert_eq!(req["messages"][1]["role"], "user");
                assert!(saw_auth);
                counter.fetch_add(1, Ordering::SeqCst);
                let reason = if status == 200 { "OK" } else { "Error" };
                write!(
                    stream,
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}"), count)
    }

    fn fast_backoff() -> Backoff {
        Backoff {
            base: Duration::from_millis(5),
            factor: 2.0,
            jitter: 0.5,
        }
    }

    #[test]
    fn http_retries_after_429() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"done"}}]}"#;
        let (url, count) = stub_server(vec![(429, "{}".into()), (200, ok.into())]);
        let p = HttpProvider::new(url, Some("test-key".into()))
            .unwrap()
            .with_backoff(fast_backoff());
        assert_eq!(p.complete(&msgs(), &ModelParams::default()).unwrap(), "done");
        assert_eq!(count.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn http_gives_up_after_max_retries() {
        let replies = (0..3).map(|_| (503, "{}".to_string())).collect();
        let (url, count) = stub_server(replies);
        let p = HttpProvider::new(url, Some("test-key".into()))
            .unwrap()
            .with_backoff(fast_backoff());
        let params = ModelParams {
            max_retries: 2,
            ..ModelParams::default()
        };
        match p.complete(&msgs(), &params) {
            Err(LlmError::Transport { status, .. }) => assert_eq!(status, Some(503)),
            r => panic!("unexpected {r:?}"),
        }
        assert_eq!(count.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_does_not_retry_client_errors() {
        let (url, count) = stub_server(vec![(400, "bad request".into())]);
        let p = HttpProvider::new(url, Some("test-key".into()))
            .unwrap()
            .with_backoff(fast_backoff());
        assert!(p.complete(&msgs(), &ModelParams::default()).is_err());
        assert_eq!(count.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_grows_geometrically() {
        let b = Backoff {
            base: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.0,
        };
        assert_eq!(b.delay(0), Duration::from_secs(1));
        assert_eq!(b.delay(2), Duration::from_secs(4));
        let jittered = Backoff::default().delay(1).as_secs_f64();
        assert!((1.5..=2.5).contains(&jittered));
    }
}
