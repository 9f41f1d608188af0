//! Zero-shot classifier backends.
//!
//! [`HttpBackend`] speaks the JSON chat-completion protocol
//! (`POST {base_url}/chat/completions`), [`MockBackend`] answers from a
//! keyword rule table, and [`CachedBackend`] wraps either with an on-disk
//! response cache keyed by `sha256(model, temperature, system, user)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::labels::{CandidateSet, LabelError, LabelSpace};
use crate::prompting::{parse_candidate_prompt, parse_final_prompt, PromptTemplate};

pub const MAX_RETRIES_CAP: u32 = 10;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error{}: {cause}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { status: Option<u16>, cause: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("environment variable `{0}` holding the API key is not set")]
    AuthMissing(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("cache io error: {0}")]
    Cache(#[from] std::io::Error),
    #[error(transparent)]
    Label(#[from] LabelError),
}

impl LlmError {
    fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport { status: None, .. } => true,
            LlmError::Transport { status: Some(s), .. } => *s >= 500,
            LlmError::Timeout(_) => true,
            _ => false,
        }
    }
}

/// One system/user request and the model's reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system: String,
    pub user: String,
    pub reply: String,
    #[serde(skip)]
    pub latency: Duration,
    /// Number of backend attempts; 0 when served from cache.
    pub attempt_count: u32,
}

impl ChatExchange {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system: system.into(),
            user: user.into(),
            reply: String::new(),
            latency: Duration::ZERO,
            attempt_count: 0,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn model_name(&self) -> &str;

    fn temperature(&self) -> f64;

    /// Fill `exchange.reply` from the backend.
    fn chat(&self, exchange: ChatExchange) -> Result<ChatExchange, LlmError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
    fn chat(&self, exchange: ChatExchange) -> Result<ChatExchange, LlmError> {
        (**self).chat(exchange)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
    fn chat(&self, exchange: ChatExchange) -> Result<ChatExchange, LlmError> {
        (**self).chat(exchange)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn temperature(&self) -> f64 {
        (**self).temperature()
    }
    fn chat(&self, exchange: ChatExchange) -> Result<ChatExchange, LlmError> {
        (**self).chat(exchange)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
    pub timeout_secs: f64,
    /// Initial backoff delay; doubles after every failed attempt.
    pub backoff_ms: u64,
    /// Environment variable holding the bearer token. `None` sends no
    /// Authorization header.
    pub api_key_env: Option<String>,
    pub embedding_model: Option<String>,
    pub concurrency: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: String::new(),
            temperature: 0.0,
            max_tokens: 256,
            max_retries: 3,
            timeout_secs: 60.0,
            backoff_ms: 500,
            api_key_env: None,
            embedding_model: None,
            concurrency: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.max_retries > MAX_RETRIES_CAP {
            return Err(LlmError::Config(format!(
                "max_retries {} exceeds the cap of {MAX_RETRIES_CAP}",
                self.max_retries
            )));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(LlmError::Config("timeout_secs must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(LlmError::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }
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
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Chat-completion client with exponential-backoff retries. Connection
/// errors, timeouts and 5xx responses are retried; 4xx responses are not.
pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| LlmError::AuthMissing(var.clone()))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            config,
            client,
            api_key,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, url: &str, body: &serde_json::Value) -> Result<String, LlmError> {
        let mut request = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| self.classify(e))?;
        let status = response.status();
        let text = response.text().map_err(|e| self.classify(e))?;
        if status.is_success() {
            Ok(text)
        } else {
            Err(LlmError::Transport {
                status: Some(status.as_u16()),
                cause: text.chars().take(200).collect(),
            })
        }
    }

    fn classify(&self, err: reqwest::Error) -> LlmError {
        if err.is_timeout() {
            LlmError::Timeout(Duration::from_secs_f64(self.config.timeout_secs))
        } else {
            LlmError::Transport {
                status: err.status().map(|s| s.as_u16()),
                cause: err.to_string(),
            }
        }
    }

    /// POST with retries; returns the body and the number of attempts made.
    fn post_with_retry(&self, path: &str, body: &serde_json::Value) -> Result<(String, u32), LlmError> {
        let url = self.endpoint(path);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.post_once(&url, body) {
                Ok(text) => return Ok((text, attempt)),
                Err(err) if err.is_retryable() && attempt <= self.config.max_retries => {
                    let delay = Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16)));
                    tracing::warn!(attempt, error = %err, ?delay, "retrying request");
                    std::thread::sleep(delay);
                }
                Err(err) => return Err(err),
            }
        }
    }

    /// Fetch one embedding vector from `{base_url}/embeddings`.
    pub fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        let model = self
            .config
            .embedding_model
            .as_deref()
            .unwrap_or(&self.config.model_name);
        let body = json!({ "model": model, "input": text });
        let (text, _) = self.post_with_retry("embeddings", &body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| LlmError::MalformedResponse("empty embedding data".into()))
    }
}

impl ChatBackend for HttpBackend {
    fn model_name(&self) -> &str {
        &self.config.model_name
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn chat(&self, mut exchange: ChatExchange) -> Result<ChatExchange, LlmError> {
        let body = json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "messages": [
                { "role": "system", "content": exchange.system },
                { "role": "user", "content": exchange.user },
            ],
        });
        let start = Instant::now();
        let (text, attempts) = self.post_with_retry("chat/completions", &body)?;
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        exchange.reply = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::MalformedResponse("no choices[0].message.content".into()))?;
        exchange.latency = start.elapsed();
        exchange.attempt_count = attempts;
        Ok(exchange)
    }
}

/// Keyword → label-set table with a default label, used as a deterministic
/// stand-in for the zero-shot classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub rules: BTreeMap<String, Vec<String>>,
    pub default: String,
}

impl MockRule {
    /// Lowercases keywords and canonicalizes labels, checking every label
    /// against `space`.
    pub fn new<K, L>(
        rules: impl IntoIterator<Item = (K, Vec<L>)>,
        default: &str,
        space: &LabelSpace,
    ) -> Result<Self, LabelError>
    where
        K: AsRef<str>,
        L: AsRef<str>,
    {
        let mut out = BTreeMap::new();
        for (keyword, labels) in rules {
            let labels = labels
                .iter()
                .map(|l| space.resolve(l.as_ref()).map(str::to_string))
                .collect::<Result<Vec<_>, _>>()?;
            out.insert(keyword.as_ref().to_lowercase(), labels);
        }
        Ok(Self {
            rules: out,
            default: space.resolve(default)?.to_string(),
        })
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<(), LabelError> {
        Self::new(self.rules.clone(), &self.default, space).map(|_| ())
    }
}

/// Union of the label sets of every keyword found in `lowercase(text)`, or
/// the default label when none match.
pub fn mock_multilabel(rule: &MockRule, text: &str, space: &LabelSpace) -> CandidateSet {
    let lower = text.to_lowercase();
    let mut set = CandidateSet::empty(space.len());
    for (keyword, labels) in &rule.rules {
        if lower.contains(keyword.as_str()) {
            for label in labels {
                if let Some(i) = space.index_of(label) {
                    set.insert(i);
                }
            }
        }
    }
    if set.is_empty() {
        if let Some(i) = space.index_of(&rule.default) {
            set.insert(i);
        }
    }
    set
}

/// How the mock answers final-prediction prompts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockPredictor {
    /// Most frequent demo label, ties to the earliest; zero-shot falls back
    /// to the first rule label of the test text.
    #[default]
    MajorityEcho,
    /// Correct-by-construction planted signal: if at least half of the demos
    /// share the test text's mock candidate key, answer the majority label
    /// of those demos, else the rule's default label.
    KeyMatch,
}

/// Deterministic backend. Recognises prompts rendered from its two
/// templates by their system message; anything else is treated as a
/// candidate-assignment request over the whole user message.
pub struct MockBackend {
    rule: MockRule,
    space: LabelSpace,
    candidate: Option<PromptTemplate>,
    final_prediction: Option<PromptTemplate>,
    predictor: MockPredictor,
}

impl MockBackend {
    pub fn new(rule: MockRule, space: LabelSpace) -> Result<Self, LabelError> {
        rule.validate(&space)?;
        Ok(Self {
            rule,
            space,
            candidate: None,
            final_prediction: None,
            predictor: MockPredictor::default(),
        })
    }

    pub fn with_templates(mut self, candidate: PromptTemplate, final_prediction: PromptTemplate) -> Self {
        self.candidate = Some(candidate);
        self.final_prediction = Some(final_prediction);
        self
    }

    pub fn with_predictor(mut self, predictor: MockPredictor) -> Self {
        self.predictor = predictor;
        self
    }

    fn tag(labels: &[&str]) -> String {
        format!("<label>{}</label>", labels.join(","))
    }

    fn candidate_reply(&self, text: &str) -> String {
        let set = mock_multilabel(&self.rule, text, &self.space);
        Self::tag(&set.labels(&self.space))
    }

    fn majority<'a, I: IntoIterator<Item = &'a str>>(labels: I) -> Option<&'a str> {
        let mut counts: Vec<(&str, usize)> = Vec::new();
        for label in labels {
            match counts.iter_mut().find(|(l, _)| *l == label) {
                Some((_, n)) => *n += 1,
                None => counts.push((label, 1)),
            }
        }
        let best = counts.iter().map(|(_, n)| *n).max()?;
        counts.into_iter().find(|(_, n)| *n == best).map(|(l, _)| l)
    }

    fn final_reply(&self, demos: &[(String, String)], test_text: &str) -> String {
        let test_set = mock_multilabel(&self.rule, test_text, &self.space);
        let zero_shot = || test_set.labels(&self.space)[0].to_string();
        let answer = match self.predictor {
            MockPredictor::MajorityEcho => Self::majority(demos.iter().map(|(_, l)| l.as_str()))
                .map(str::to_string)
                .unwrap_or_else(zero_shot),
            MockPredictor::KeyMatch => {
                let matching: Vec<&str> = demos
                    .iter()
                    .filter(|(t, _)| mock_multilabel(&self.rule, t, &self.space) == test_set)
                    .map(|(_, l)| l.as_str())
                    .collect();
                if demos.is_empty() {
                    zero_shot()
                } else if 2 * matching.len() >= demos.len() {
                    Self::majority(matching).expect("non-empty").to_string()
                } else {
                    self.rule.default.clone()
                }
            }
        };
        Self::tag(&[&answer])
    }
}

impl ChatBackend for MockBackend {
    fn model_name(&self) -> &str {
        "mock"
    }

    fn temperature(&self) -> f64 {
        0.0
    }

    fn chat(&self, mut exchange: ChatExchange) -> Result<ChatExchange, LlmError> {
        let is_system = |t: &Option<PromptTemplate>| {
            t.as_ref()
                .is_some_and(|t| t.render_system(&self.space) == exchange.system)
        };
        exchange.reply = if is_system(&self.final_prediction) {
            let t = self.final_prediction.as_ref().expect("checked");
            match parse_final_prompt(t, &exchange.user, &self.space) {
                Some((demos, text)) => self.final_reply(&demos.demos, &text),
                // retry prompts carry a trailing reminder after the template
                None => match exchange
                    .user
                    .rsplit_once("\n\n")
                    .and_then(|(head, _)| parse_final_prompt(t, head, &self.space))
                {
                    Some((demos, text)) => self.final_reply(&demos.demos, &text),
                    None => self.candidate_reply(&exchange.user),
                },
            }
        } else if is_system(&self.candidate) {
            let t = self.candidate.as_ref().expect("checked");
            let text = parse_candidate_prompt(t, &exchange.user, &self.space)
                .unwrap_or_else(|| exchange.user.clone());
            self.candidate_reply(&text)
        } else {
            self.candidate_reply(&exchange.user)
        };
        exchange.attempt_count = 1;
        Ok(exchange)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    model: String,
    temperature: f64,
    system: String,
    user: String,
    reply: String,
}

/// Cache key: hex sha256 over the JSON encoding of the request identity.
pub fn cache_key(model: &str, system: &str, user: &str, temperature: f64) -> String {
    let identity = json!([model, temperature, system, user]).to_string();
    hex::encode(Sha256::digest(identity.as_bytes()))
}

/// Disk-backed response cache around another backend. One JSON file per
/// request under `dir`.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    write_lock: Mutex<()>,
    calls: AtomicUsize,
    hits: AtomicUsize,
}

impl<B: ChatBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl AsRef<Path>) -> Result<Self, LlmError> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            inner,
            dir: dir.as_ref().to_path_buf(),
            write_lock: Mutex::new(()),
            calls: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        })
    }

    /// Requests forwarded to the wrapped backend since construction.
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }
}

impl<B: ChatBackend> ChatBackend for CachedBackend<B> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    fn chat(&self, mut exchange: ChatExchange) -> Result<ChatExchange, LlmError> {
        let key = cache_key(self.model_name(), &exchange.system, &exchange.user, self.temperature());
        let path = self.path_for(&key);
        if let Ok(raw) = fs::read_to_string(&path) {
            if let Ok(record) = serde_json::from_str::<CacheRecord>(&raw) {
                if record.system == exchange.system && record.user == exchange.user {
                    self.hits.fetch_add(1, Ordering::SeqCst);
                    exchange.reply = record.reply;
                    exchange.attempt_count = 0;
                    exchange.latency = Duration::ZERO;
                    return Ok(exchange);
                }
            }
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let exchange = self.inner.chat(exchange)?;
        let record = CacheRecord {
            model: self.model_name().to_string(),
            temperature: self.temperature(),
            system: exchange.system.clone(),
            user: exchange.user.clone(),
            reply: exchange.reply.clone(),
        };
        let body = serde_json::to_string_pretty(&record).expect("cache record serializes");
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let tmp = self.dir.join(format!("{key}.json.tmp"));
        let mut file = fs::File::create(&tmp)?;
        file.write_all(body.as_bytes())?;
        file.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(exchange)
    }
}

/// Map `f` over `items` on at most `limit` worker threads, preserving order.
pub fn map_bounded<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every slot filled")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{render_candidate_prompt, render_final_prompt, BuiltinTask, DemoBlock, PromptKind};

    fn space() -> LabelSpace {
        BuiltinTask::Sst5.label_space()
    }

    fn rule() -> MockRule {
        MockRule::new(
            [
                ("terrible", vec!["negative"]),
                ("sad", vec!["negative"]),
                ("angry", vec!["very negative"]),
            ],
            "neutral",
            &space(),
        )
        .unwrap()
    }

    #[test]
    fn mock_multilabel_unions_rules() {
        let set = mock_multilabel(&rule(), "Sad and ANGRY", &space());
        assert_eq!(set.labels(&space()), vec!["very negative", "negative"]);
        let set = mock_multilabel(&rule(), "nothing here", &space());
        assert_eq!(set.labels(&space()), vec!["neutral"]);
        assert_eq!(
            mock_multilabel(&rule(), "sad", &space()),
            mock_multilabel(&rule(), "sad", &space())
        );
    }

    #[test]
    fn mock_rule_rejects_unknown_labels() {
        assert!(MockRule::new([("x", vec!["joyful"])], "neutral", &space()).is_err());
        assert!(MockRule::new([("x", vec!["negative"])], "joyful", &space()).is_err());
    }

    #[test]
    fn mock_chat_replies_with_tags() {
        let mock = MockBackend::new(rule(), space()).unwrap();
        let out = mock.chat(ChatExchange::new("sys", "this was terrible")).unwrap();
        assert_eq!(out.reply, "<label>negative</label>");
        let out = mock.chat(ChatExchange::new("sys", "meh")).unwrap();
        assert_eq!(out.reply, "<label>neutral</label>");
    }

    #[test]
    fn mock_reads_only_the_example_text_of_candidate_prompts() {
        // "negative" keyword would match the template's own label list
        let space = space();
        let rule = MockRule::new([("unfavorable", vec!["very positive"])], "neutral", &space).unwrap();
        let cand = BuiltinTask::Sst5.template(PromptKind::CandidateAssignment);
        let fin = BuiltinTask::Sst5.template(PromptKind::FinalPrediction);
        let mock = MockBackend::new(rule, space.clone()).unwrap().with_templates(cand.clone(), fin);
        let (system, user) = render_candidate_prompt(&cand, "a fine film", &space).unwrap();
        let out = mock.chat(ChatExchange::new(system, user)).unwrap();
        assert_eq!(out.reply, "<label>neutral</label>");
    }

    #[test]
    fn majority_echo_final_prediction() {
        let space = space();
        let cand = BuiltinTask::Sst5.template(PromptKind::CandidateAssignment);
        let fin = BuiltinTask::Sst5.template(PromptKind::FinalPrediction);
        let mock = MockBackend::new(rule(), space.clone())
            .unwrap()
            .with_templates(cand, fin.clone());
        let demos = DemoBlock::new([("a", "positive"), ("b", "positive"), ("c", "negative")]);
        let (system, user) = render_final_prompt(&fin, &demos, "test", &space).unwrap();
        let out = mock.chat(ChatExchange::new(system, user)).unwrap();
        assert_eq!(out.reply, "<label>positive</label>");
    }

    #[test]
    fn cache_key_depends_on_every_field() {
        let base = cache_key("m", "s", "u", 0.0);
        assert_eq!(base.len(), 64);
        assert_ne!(base, cache_key("m2", "s", "u", 0.0));
        assert_ne!(base, cache_key("m", "s2", "u", 0.0));
        assert_ne!(base, cache_key("m", "s", "u2", 0.0));
        assert_ne!(base, cache_key("m", "s", "u", 0.5));
    }

    #[test]
    fn cached_backend_serves_second_call_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachedBackend::new(MockBackend::new(rule(), space()).unwrap(), dir.path()).unwrap();
        let a = cached.chat(ChatExchange::new("s", "terrible")).unwrap();
        assert_eq!((cached.backend_calls(), a.attempt_count), (1, 1));
        let b = cached.chat(ChatExchange::new("s", "terrible")).unwrap();
        assert_eq!((cached.backend_calls(), b.attempt_count), (1, 0));
        assert_eq!(a.reply, b.reply);

        let fresh = CachedBackend::new(MockBackend::new(rule(), space()).unwrap(), dir.path()).unwrap();
        fresh.chat(ChatExchange::new("s", "terrible")).unwrap();
        assert_eq!(fresh.backend_calls(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_ok());
        let bad = BackendConfig {
            max_retries: 11,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackendConfig {
            temperature: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_key_env_is_auth_error() {
        let cfg = BackendConfig {
            api_key_env: Some("MARGINSEL_TEST_SURELY_UNSET_KEY".into()),
            ..Default::default()
        };
        assert!(matches!(HttpBackend::new(cfg), Err(LlmError::AuthMissing(_))));
    }

    #[test]
    fn map_bounded_preserves_order() {
        let items: Vec<u32> = (0..50).collect();
        let out = map_bounded(&items, 4, |x| x * 2);
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(map_bounded(&Vec::<u32>::new(), 4, |x| *x).is_empty());
    }
}
