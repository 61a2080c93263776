//! Text-generation providers shared by the compressor, the teacher and the
//! reader.
//!
//! Every provider answers a [`GenerationRequest`]. Besides the rendered prompt
//! a request carries its structured inputs ([`RequestRole`]); the HTTP client
//! ignores them, while the mocks use them to stay deterministic under
//! concurrent batches.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::Semaphore;
use crate::corpus::Document;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider {provider:?} failed after {attempts} attempt(s): {message}")]
    Transport {
        provider: String,
        attempts: u32,
        message: String,
    },
    #[error("provider {provider:?} returned a malformed response: {message}")]
    MalformedResponse { provider: String, message: String },
    #[error("scripted provider: {0}")]
    Script(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

/// Structured inputs of one compression (or teacher) step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    /// Stable per-query key, usually the example id.
    pub key: &'a str,
    /// 1-based iteration index.
    pub step: usize,
    pub question: &'a str,
    pub documents: &'a [Document],
    /// Empty at step 1.
    pub previous_context: &'a str,
}

#[derive(Debug, Clone, Copy)]
pub enum RequestRole<'a> {
    Compress(StepContext<'a>),
    Read {
        key: &'a str,
        question: &'a str,
        context: &'a str,
    },
    Other,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub prompt: &'a str,
    pub max_tokens: usize,
    pub role: RequestRole<'a>,
}

impl<'a> GenerationRequest<'a> {
    pub fn plain(prompt: &'a str, max_tokens: usize) -> Self {
        GenerationRequest {
            prompt,
            max_tokens,
            role: RequestRole::Other,
        }
    }

    /// `(key, step)` used by rule-table mocks; reader calls use step 0.
    pub fn script_key(&self) -> Option<(&'a str, usize)> {
        match self.role {
            RequestRole::Compress(ctx) => Some((ctx.key, ctx.step)),
            RequestRole::Read { key, .. } => Some((key, 0)),
            RequestRole::Other => None,
        }
    }
}

pub trait Provider: Send + Sync {
    fn name(&self) -> &str;

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError>;

    /// Upper bound on concurrent `generate` calls, if the provider has one.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }

    /// Maximum prompt length in tokens, if known.
    fn context_window(&self) -> Option<usize> {
        None
    }
}

impl<P: Provider + ?Sized> Provider for &P {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError> {
        (**self).generate(request)
    }
    fn max_concurrency(&self) -> Option<usize> {
        (**self).max_concurrency()
    }
    fn context_window(&self) -> Option<usize> {
        (**self).context_window()
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError> {
        (**self).generate(request)
    }
    fn max_concurrency(&self) -> Option<usize> {
        (**self).max_concurrency()
    }
    fn context_window(&self) -> Option<usize> {
        (**self).context_window()
    }
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError> {
        (**self).generate(request)
    }
    fn max_concurrency(&self) -> Option<usize> {
        (**self).max_concurrency()
    }
    fn context_window(&self) -> Option<usize> {
        (**self).context_window()
    }
}

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    pub name: String,
    pub endpoint: String,
    /// Environment variable holding a bearer token.
    pub auth_env: Option<String>,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub backoff: Duration,
    pub max_concurrency: Option<usize>,
    pub context_window: Option<usize>,
}

impl HttpProviderConfig {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>) -> Self {
        HttpProviderConfig {
            name: name.into(),
            endpoint: endpoint.into(),
            auth_env: None,
            timeout: Duration::from_secs(120),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            max_concurrency: None,
            context_window: None,
        }
    }
}

#[derive(Serialize)]
struct HttpRequestBody<'a> {
    prompt: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct HttpResponseBody {
    text: String,
}

enum AttemptError {
    Retry(String),
    Fail(String),
    Malformed(String),
}

/// `POST {"prompt", "max_tokens"}` → `{"text"}`.
pub struct HttpProvider {
    config: HttpProviderConfig,
    token: Option<String>,
    agent: ureq::Agent,
    limiter: Option<Semaphore>,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, ProviderError> {
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::Config(format!(
                    "provider {:?}: environment variable {var} is not set",
                    config.name
                ))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpProvider {
            limiter: config.max_concurrency.map(Semaphore::new),
            config,
            token,
            agent,
        })
    }

    fn attempt(&self, request: &GenerationRequest<'_>) -> Result<String, AttemptError> {
        let _permit = self.limiter.as_ref().map(Semaphore::acquire);
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(HttpRequestBody {
                prompt: request.prompt,
                max_tokens: request.max_tokens,
            })
            .map_err(|e| AttemptError::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let message = format!("HTTP status {status}");
            // client errors will not fix themselves on retry
            return Err(if status == 429 || status >= 500 {
                AttemptError::Retry(message)
            } else {
                AttemptError::Fail(message)
            });
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Retry(e.to_string()))?;
        serde_json::from_str::<HttpResponseBody>(&body)
            .map(|b| b.text)
            .map_err(|e| AttemptError::Malformed(e.to_string()))
    }
}

impl Provider for HttpProvider {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(AttemptError::Malformed(message)) => {
                    return Err(ProviderError::MalformedResponse {
                        provider: self.config.name.clone(),
                        message,
                    })
                }
                Err(AttemptError::Fail(message)) => {
                    return Err(ProviderError::Transport {
                        provider: self.config.name.clone(),
                        attempts: attempt,
                        message,
                    })
                }
                Err(AttemptError::Retry(message)) => {
                    log::warn!(
                        "provider {} attempt {attempt}/{attempts} failed: {message}",
                        self.config.name
                    );
                    last = message;
                    if attempt < attempts {
                        std::thread::sleep(self.config.backoff * attempt);
                    }
                }
            }
        }
        Err(ProviderError::Transport {
            provider: self.config.name.clone(),
            attempts,
            message: last,
        })
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.config.max_concurrency
    }

    fn context_window(&self) -> Option<usize> {
        self.config.context_window
    }
}

// ---------------------------------------------------------------------------
// Scripted mock
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Script {
    /// Responses consumed in call order.
    Sequence(Vec<String>),
    /// Responses keyed by `(key, step)`; reader calls use step 0.
    Rules(BTreeMap<(String, usize), String>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallRecord {
    pub key: Option<String>,
    pub step: Option<usize>,
    pub prompt: String,
}

#[derive(Deserialize)]
struct ScriptLine {
    #[serde(default)]
    key: Option<String>,
    #[serde(default)]
    step: Option<usize>,
    text: String,
}

/// Deterministic mock that replays a script and logs every call.
pub struct ScriptedProvider {
    name: String,
    script: Script,
    cursor: Mutex<usize>,
    calls: Mutex<Vec<CallRecord>>,
}

impl ScriptedProvider {
    pub fn new(name: impl Into<String>, script: Script) -> Self {
        ScriptedProvider {
            name: name.into(),
            script,
            cursor: Mutex::new(0),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn sequence<S: Into<String>>(name: impl Into<String>, responses: impl IntoIterator<Item = S>) -> Self {
        Self::new(name, Script::Sequence(responses.into_iter().map(Into::into).collect()))
    }

    pub fn rules<K: Into<String>, S: Into<String>>(
        name: impl Into<String>,
        rules: impl IntoIterator<Item = ((K, usize), S)>,
    ) -> Self {
        Self::new(
            name,
            Script::Rules(rules.into_iter().map(|((k, s), t)| ((k.into(), s), t.into())).collect()),
        )
    }

    /// Reads a JSONL script. Lines are either all `{"text"}` (a sequence) or
    /// all `{"key", "step"?, "text"}` (a rule table; `step` defaults to 0).
    pub fn from_reader<R: BufRead>(name: impl Into<String>, reader: R) -> Result<Self, ProviderError> {
        let mut seq = Vec::new();
        let mut rules = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| ProviderError::Script(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptLine =
                serde_json::from_str(&line).map_err(|e| ProviderError::Script(format!("line {}: {e}", i + 1)))?;
            match rec.key {
                Some(key) => {
                    rules.insert((key, rec.step.unwrap_or(0)), rec.text);
                }
                None => seq.push(rec.text),
            }
        }
        let script = match (seq.is_empty(), rules.is_empty()) {
            (_, true) => Script::Sequence(seq),
            (true, false) => Script::Rules(rules),
            (false, false) => return Err(ProviderError::Script("script mixes keyed and unkeyed lines".into())),
        };
        Ok(Self::new(name, script))
    }

    pub fn from_file(name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| ProviderError::Script(format!("{}: {e}", path.display())))?;
        Self::from_reader(name, std::io::BufReader::new(file))
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("call log poisoned").len()
    }
}

impl Provider for ScriptedProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError> {
        let key = request.script_key();
        self.calls.lock().expect("call log poisoned").push(CallRecord {
            key: key.map(|(k, _)| k.to_string()),
            step: key.map(|(_, s)| s),
            prompt: request.prompt.to_string(),
        });
        match &self.script {
            Script::Sequence(items) => {
                let mut cursor = self.cursor.lock().expect("cursor poisoned");
                let out = items.get(*cursor).cloned().ok_or_else(|| {
                    ProviderError::Script(format!("script exhausted after {} responses", items.len()))
                })?;
                *cursor += 1;
                Ok(out)
            }
            Script::Rules(rules) => {
                let (k, s) = key.ok_or_else(|| ProviderError::Script("request has no script key".into()))?;
                rules
                    .get(&(k.to_string(), s))
                    .cloned()
                    .ok_or_else(|| ProviderError::Script(format!("no scripted response for ({k:?}, {s})")))
            }
        }
    }

    fn max_concurrency(&self) -> Option<usize> {
        // a sequence is only reproducible when consumed in a single order
        match self.script {
            Script::Sequence(_) => Some(1),
            Script::Rules(_) => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Closure-backed and helper providers
// ---------------------------------------------------------------------------

/// Wraps a closure; handy for oracles and tests.
pub struct FnProvider<F> {
    name: String,
    f: F,
    max_concurrency: Option<usize>,
    context_window: Option<usize>,
}

impl<F> FnProvider<F>
where
    F: Fn(&GenerationRequest<'_>) -> Result<String, ProviderError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnProvider {
            name: name.into(),
            f,
            max_concurrency: None,
            context_window: None,
        }
    }

    pub fn with_context_window(mut self, tokens: usize) -> Self {
        self.context_window = Some(tokens);
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = Some(n);
        self
    }
}

impl<F> Provider for FnProvider<F>
where
    F: Fn(&GenerationRequest<'_>) -> Result<String, ProviderError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError> {
        (self.f)(request)
    }
    fn max_concurrency(&self) -> Option<usize> {
        self.max_concurrency
    }
    fn context_window(&self) -> Option<usize> {
        self.context_window
    }
}

/// Mock reader: answers with the first double-quoted span of its context,
/// or a fixed default when there is none.
pub struct EchoReader {
    name: String,
    default_answer: String,
}

impl EchoReader {
    pub fn new(name: impl Into<String>, default_answer: impl Into<String>) -> Self {
        EchoReader {
            name: name.into(),
            default_answer: default_answer.into(),
        }
    }
}

pub fn first_quoted_span(text: &str) -> Option<&str> {
    let start = text.find('"')? + 1;
    let len = text[start..].find('"')?;
    Some(&text[start..start + len]).filter(|s| !s.trim().is_empty())
}

impl Provider for EchoReader {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError> {
        let context = match request.role {
            RequestRole::Read { context, .. } => context,
            _ => request.prompt,
        };
        Ok(first_quoted_span(context).unwrap_or(&self.default_answer).to_string())
    }
}

/// Adds a constant delay before delegating.
pub struct Delayed<P> {
    inner: P,
    delay: Duration,
}

impl<P: Provider> Delayed<P> {
    pub fn new(inner: P, delay: Duration) -> Self {
        Delayed { inner, delay }
    }
}

impl<P: Provider> Provider for Delayed<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError> {
        std::thread::sleep(self.delay);
        self.inner.generate(request)
    }
    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }
    fn context_window(&self) -> Option<usize> {
        self.inner.context_window()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn step_req<'a>(prompt: &'a str, key: &'a str, step: usize) -> GenerationRequest<'a> {
        GenerationRequest {
            prompt,
            max_tokens: 10,
            role: RequestRole::Compress(StepContext {
                key,
                step,
                question: "q",
                documents: &[],
                previous_context: "",
            }),
        }
    }

    #[test]
    fn sequence_replays_in_order_then_exhausts() {
        let p = ScriptedProvider::sequence("mock", ["one", "two"]);
        let r = GenerationRequest::plain("p", 5);
        assert_eq!(p.generate(&r).unwrap(), "one");
        assert_eq!(p.generate(&r).unwrap(), "two");
        assert!(matches!(p.generate(&r), Err(ProviderError::Script(_))));
        assert_eq!(p.call_count(), 3);
        assert_eq!(p.max_concurrency(), Some(1));
    }

    #[test]
    fn rules_are_keyed_by_question_and_step() {
        let p = ScriptedProvider::rules("mock", [(("q1", 1), "a"), (("q1", 2), "b"), (("q2", 1), "c")]);
        assert_eq!(p.generate(&step_req("x", "q1", 2)).unwrap(), "b");
        assert_eq!(p.generate(&step_req("x", "q2", 1)).unwrap(), "c");
        assert!(p.generate(&step_req("x", "q3", 1)).is_err());
        let calls = p.calls();
        assert_eq!(calls[0].key.as_deref(), Some("q1"));
        assert_eq!(calls[0].step, Some(2));
    }

    #[test]
    fn script_files_parse() {
        let seq = ScriptedProvider::from_reader("s", Cursor::new("{\"text\":\"a\"}\n\n{\"text\":\"b\"}\n")).unwrap();
        assert_eq!(seq.script, Script::Sequence(vec!["a".into(), "b".into()]));
        let rules = ScriptedProvider::from_reader(
            "r",
            Cursor::new("{\"key\":\"q\",\"step\":2,\"text\":\"a\"}\n{\"key\":\"q\",\"text\":\"ans\"}\n"),
        )
        .unwrap();
        match rules.script {
            Script::Rules(m) => {
                assert_eq!(m[&("q".to_string(), 2)], "a");
                assert_eq!(m[&("q".to_string(), 0)], "ans");
            }
            other => panic!("{other:?}"),
        }
        assert!(
            ScriptedProvider::from_reader("x", Cursor::new("{\"text\":\"a\"}\n{\"key\":\"q\",\"text\":\"b\"}"))
                .is_err()
        );
    }

    #[test]
    fn echo_reader_contract() {
        let r = EchoReader::new("echo", "unknown");
        let req = GenerationRequest {
            prompt: "ignored",
            max_tokens: 5,
            role: RequestRole::Read {
                key: "q",
                question: "who?",
                context: "The conductor is \"Eric Whitacre\" per the notes.",
            },
        };
        assert_eq!(r.generate(&req).unwrap(), "Eric Whitacre");
        let empty = GenerationRequest {
            role: RequestRole::Read {
                key: "q",
                question: "who?",
                context: "",
            },
            ..req
        };
        assert_eq!(r.generate(&empty).unwrap(), "unknown");
    }

    #[test]
    fn missing_auth_env_is_a_config_error() {
        let mut cfg = HttpProviderConfig::new("h", "http://127.0.0.1:9");
        cfg.auth_env = Some("CTXPRESS_TEST_SURELY_UNSET_VAR".into());
        assert!(matches!(HttpProvider::new(cfg), Err(ProviderError::Config(_))));
    }
}
