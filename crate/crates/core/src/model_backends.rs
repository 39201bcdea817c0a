//! Chat-completion and text-embedding backends.
//!
//! Two implementations per interface: a live HTTP client speaking the
//! OpenAI-compatible wire format, and deterministic mocks (rule-driven chat,
//! seeded hashing embedder) so every downstream test runs without a network.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        ChatRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChatResponse {
    pub text: String,
    pub latency: Duration,
    pub backend_id: String,
}

/// A unit-normalized dense text embedding (zero vector for empty input).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalize raw values to unit L2 norm; an all-zero input stays zero.
    pub fn new(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut values {
                *v /= norm;
            }
        }
        EmbeddingVector { values }
    }

    pub fn zero(dims: usize) -> Self {
        EmbeddingVector { values: vec![0.0; dims] }
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Cosine similarity; 0.0 when either vector is zero, exactly 1.0 for
/// bitwise-identical nonzero vectors.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, BackendError> {
    if a.dims() != b.dims() {
        return Err(BackendError::DimensionMismatch { left: a.dims(), right: b.dims() });
    }
    if a.is_zero() || b.is_zero() {
        return Ok(0.0);
    }
    if a.values == b.values {
        return Ok(1.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(dot / (na * nb))
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
    fn id(&self) -> &str;
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
    fn dims(&self) -> usize;
    fn id(&self) -> &str;
}

pub fn chat_complete(
    backend: &dyn ChatBackend,
    req: &ChatRequest,
) -> Result<ChatResponse, BackendError> {
    backend.chat(req)
}

pub fn embed_text(backend: &dyn EmbedBackend, text: &str) -> Result<EmbeddingVector, BackendError> {
    backend.embed(text)
}

// ---------------------------------------------------------------------------
// Mock backends
// ---------------------------------------------------------------------------

/// How a mock rule matches the user prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleMatch {
    Substring(String),
    Regex(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: RuleMatch,
    pub response: String,
}

/// Rule file for the scripted chat mock: ordered rules, first match wins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockSpec {
    pub rules: Vec<MockRule>,
    pub default: String,
}

/// Scripted chat backend: a pure function of (rules, request).
pub struct MockChatBackend {
    rules: Vec<(CompiledMatch, String)>,
    default: String,
    id: String,
}

enum CompiledMatch {
    Substring(String),
    Regex(regex::Regex),
}

impl MockChatBackend {
    pub fn new(spec: &MockSpec) -> Result<Self, BackendError> {
        let mut rules = Vec::with_capacity(spec.rules.len());
        for rule in &spec.rules {
            let compiled = match &rule.matcher {
                RuleMatch::Substring(s) => CompiledMatch::Substring(s.clone()),
                RuleMatch::Regex(r) => CompiledMatch::Regex(
                    regex::Regex::new(r)
                        .map_err(|e| BackendError::BadResponse(format!("bad mock regex: {e}")))?,
                ),
            };
            rules.push((compiled, rule.response.clone()));
        }
        Ok(MockChatBackend { rules, default: spec.default.clone(), id: "mock".into() })
    }

    /// Convenience constructor from (substring, response) pairs.
    pub fn from_pairs(pairs: &[(&str, &str)], default: &str) -> Self {
        let spec = MockSpec {
            rules: pairs
                .iter()
                .map(|(m, r)| MockRule {
                    matcher: RuleMatch::Substring(m.to_string()),
                    response: r.to_string(),
                })
                .collect(),
            default: default.to_string(),
        };
        MockChatBackend::new(&spec).expect("substring rules cannot fail to compile")
    }
}

impl ChatBackend for MockChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let text = self
            .rules
            .iter()
            .find(|(m, _)| match m {
                CompiledMatch::Substring(s) => req.user_prompt.contains(s.as_str()),
                CompiledMatch::Regex(r) => r.is_match(&req.user_prompt),
            })
            .map(|(_, resp)| resp.clone())
            .unwrap_or_else(|| self.default.clone());
        Ok(ChatResponse { text, latency: Duration::ZERO, backend_id: self.id.clone() })
    }

    fn id(&self) -> &str {
        &self.id
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Seeded hashing embedder: lowercase, split on non-alphanumeric, hash each
/// token to a (bucket, sign) pair, accumulate, L2-normalize. Deterministic
/// across processes and platforms; empty token set yields the zero vector.
pub struct HashEmbedBackend {
    dims: usize,
    seed: u64,
    id: String,
}

pub const DEFAULT_HASH_DIMS: usize = 256;

impl HashEmbedBackend {
    pub fn new(dims: usize, seed: u64) -> Self {
        HashEmbedBackend { dims, seed, id: format!("hash-{dims}-{seed}") }
    }
}

impl Default for HashEmbedBackend {
    fn default() -> Self {
        HashEmbedBackend::new(DEFAULT_HASH_DIMS, 0)
    }
}

impl EmbedBackend for HashEmbedBackend {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        let mut acc = vec![0.0f64; self.dims];
        let lowered = text.to_lowercase();
        let mut any = false;
        for token in lowered.split(|c: char| !c.is_alphanumeric()) {
            if token.is_empty() {
                continue;
            }
            any = true;
            let h = fnv1a(self.seed, token.as_bytes());
            let idx = ((h >> 1) % self.dims as u64) as usize;
            let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
            acc[idx] += sign;
        }
        if !any {
            return Ok(EmbeddingVector::zero(self.dims));
        }
        Ok(EmbeddingVector::new(acc))
    }

    fn dims(&self) -> usize {
        self.dims
    }

    fn id(&self) -> &str {
        &self.id
    }
}

// ---------------------------------------------------------------------------
// Live HTTP backends (OpenAI-compatible)
// ---------------------------------------------------------------------------

/// Retry policy for transient failures (HTTP 429/5xx, transport errors).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay_ms: 500, factor: 4.0 }
    }
}

impl RetryPolicy {
    /// Full-jitter delay before retry number `attempt` (1-based).
    fn delay(&self, attempt: u32, jitter_seed: u64) -> Duration {
        let cap = self.base_delay_ms as f64 * self.factor.powi(attempt as i32 - 1);
        let h = fnv1a(jitter_seed, &attempt.to_le_bytes());
        let frac = (h % 1_000_000) as f64 / 1_000_000.0;
        Duration::from_millis((cap * frac) as u64)
    }
}

/// Counting semaphore bounding concurrent in-flight requests.
struct InflightGate {
    state: Mutex<usize>,
    cv: Condvar,
    max: usize,
}

impl InflightGate {
    fn new(max: usize) -> Self {
        InflightGate { state: Mutex::new(0), cv: Condvar::new(), max: max.max(1) }
    }

    fn acquire(&self) {
        let mut n = self.state.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
    }

    fn release(&self) {
        let mut n = self.state.lock().unwrap();
        *n -= 1;
        self.cv.notify_one();
    }
}

// Wire structs: field order here defines the serialized byte layout.

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WireChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WireChatRequest {
    pub model: String,
    pub messages: Vec<WireChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WireChatChoice {
    pub index: u32,
    pub message: WireChatMessage,
    pub finish_reason: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WireChatResponse {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub model: String,
    pub choices: Vec<WireChatChoice>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WireEmbeddingRequest {
    pub model: String,
    pub input: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WireEmbeddingData {
    pub object: String,
    pub index: u32,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct WireEmbeddingResponse {
    pub object: String,
    pub data: Vec<WireEmbeddingData>,
    pub model: String,
}

/// Build the exact chat-completions request body for `req`.
pub fn encode_chat_request(model: &str, req: &ChatRequest) -> WireChatRequest {
    WireChatRequest {
        model: model.to_string(),
        messages: vec![
            WireChatMessage { role: "system".into(), content: req.system_prompt.clone() },
            WireChatMessage { role: "user".into(), content: req.user_prompt.clone() },
        ],
        temperature: req.temperature,
        max_tokens: req.max_tokens,
    }
}

/// Extract the completion text from a parsed chat response.
pub fn decode_chat_response(resp: &WireChatResponse) -> Result<String, BackendError> {
    resp.choices
        .first()
        .map(|c| c.message.content.clone())
        .ok_or_else(|| BackendError::BadResponse("response has no choices".into()))
}

pub const ENV_API_BASE: &str = "MAP_API_BASE";
pub const ENV_API_KEY: &str = "MAP_API_KEY";

/// Shared settings for the live chat and embedding clients.
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub retry: RetryPolicy,
    pub max_inflight: usize,
    pub timeout: Duration,
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackendConfig {
            base_url: base_url.into(),
            api_key: std::env::var(ENV_API_KEY).ok(),
            model: model.into(),
            retry: RetryPolicy::default(),
            max_inflight: 8,
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct HttpChatBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    gate: InflightGate,
    id: String,
}

impl HttpChatBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let id = format!("http:{}", config.model);
        let gate = InflightGate::new(config.max_inflight);
        Ok(HttpChatBackend { config, client, gate, id })
    }
}

fn is_transient_status(status: reqwest::StatusCode) -> bool {
    status.as_u16() == 429 || status.is_server_error()
}

fn post_with_retry<T: serde::de::DeserializeOwned>(
    client: &reqwest::blocking::Client,
    config: &HttpBackendConfig,
    path: &str,
    body: &impl Serialize,
) -> Result<T, BackendError> {
    let url = format!("{}{}", config.base_url.trim_end_matches('/'), path);
    let mut last_err = String::new();
    for attempt in 1..=config.retry.attempts {
        if attempt > 1 {
            std::thread::sleep(config.retry.delay(attempt - 1, 0x9e3779b9));
        }
        let mut request = client.post(&url).json(body);
        if let Some(key) = &config.api_key {
            request = request.bearer_auth(key);
        }
        match request.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    let text = resp
                        .text()
                        .map_err(|e| BackendError::BadResponse(e.to_string()))?;
                    return serde_json::from_str(&text).map_err(|e| {
                        BackendError::BadResponse(format!("malformed payload: {e}"))
                    });
                }
                if is_transient_status(status) {
                    last_err = format!("HTTP {status}");
                    continue;
                }
                return Err(BackendError::Unavailable(format!("HTTP {status} from {url}")));
            }
            Err(e) => {
                last_err = e.to_string();
                continue;
            }
        }
    }
    Err(BackendError::Unavailable(format!(
        "{} after {} attempts: {last_err}",
        url, config.retry.attempts
    )))
}

impl ChatBackend for HttpChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.gate.acquire();
        let started = Instant::now();
        let result = (|| {
            let wire = encode_chat_request(&self.config.model, req);
            let resp: WireChatResponse =
                post_with_retry(&self.client, &self.config, "/chat/completions", &wire)?;
            decode_chat_response(&resp)
        })();
        self.gate.release();
        result.map(|text| ChatResponse {
            text,
            latency: started.elapsed(),
            backend_id: self.id.clone(),
        })
    }

    fn id(&self) -> &str {
        &self.id
    }
}

pub struct HttpEmbedBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    gate: InflightGate,
    /// Backend-reported dimensionality, learned from the first response.
    dims: Mutex<Option<usize>>,
    id: String,
}

impl HttpEmbedBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let id = format!("http-embed:{}", config.model);
        let gate = InflightGate::new(config.max_inflight);
        Ok(HttpEmbedBackend { config, client, gate, dims: Mutex::new(None), id })
    }
}

impl EmbedBackend for HttpEmbedBackend {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.gate.acquire();
        let result = (|| {
            let wire = WireEmbeddingRequest {
                model: self.config.model.clone(),
                input: text.to_string(),
            };
            let resp: WireEmbeddingResponse =
                post_with_retry(&self.client, &self.config, "/embeddings", &wire)?;
            let data = resp
                .data
                .first()
                .ok_or_else(|| BackendError::BadResponse("embedding response has no data".into()))?;
            let mut dims = self.dims.lock().unwrap();
            match *dims {
                Some(d) if d != data.embedding.len() => {
                    return Err(BackendError::DimensionMismatch {
                        left: d,
                        right: data.embedding.len(),
                    })
                }
                None => *dims = Some(data.embedding.len()),
                _ => {}
            }
            Ok(EmbeddingVector::new(data.embedding.clone()))
        })();
        self.gate.release();
        result
    }

    fn dims(&self) -> usize {
        self.dims.lock().unwrap().unwrap_or(0)
    }

    fn id(&self) -> &str {
        &self.id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_rule_matches_substring() {
        let mock = MockChatBackend::from_pairs(&[("Department", "CCU")], "none");
        let req = ChatRequest::new("sys", "Choose a Department for this patient");
        assert_eq!(mock.chat(&req).unwrap().text, "CCU");
    }

    #[test]
    fn mock_falls_back_to_default() {
        let mock = MockChatBackend::from_pairs(&[("Department", "CCU")], "fallback text");
        let req = ChatRequest::new("sys", "nothing matching here");
        assert_eq!(mock.chat(&req).unwrap().text, "fallback text");
    }

    #[test]
    fn mock_rules_are_ordered() {
        let mock = MockChatBackend::from_pairs(&[("alpha", "first"), ("alp", "second")], "d");
        let req = ChatRequest::new("s", "alphabet");
        assert_eq!(mock.chat(&req).unwrap().text, "first");
    }

    #[test]
    fn mock_regex_rule() {
        let spec = MockSpec {
            rules: vec![MockRule {
                matcher: RuleMatch::Regex("^triage:".into()),
                response: "MICU".into(),
            }],
            default: "d".into(),
        };
        let mock = MockChatBackend::new(&spec).unwrap();
        assert_eq!(mock.chat(&ChatRequest::new("s", "triage: go")).unwrap().text, "MICU");
        assert_eq!(mock.chat(&ChatRequest::new("s", "x triage: go")).unwrap().text, "d");
    }

    #[test]
    fn hash_embed_is_deterministic() {
        let backend = HashEmbedBackend::default();
        let a = backend.embed("pulmonary nodules").unwrap();
        let b = backend.embed("pulmonary nodules").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hash_embed_empty_is_zero() {
        let backend = HashEmbedBackend::default();
        let v = backend.embed("").unwrap();
        assert!(v.is_zero());
        let w = backend.embed("  --- !!! ").unwrap();
        assert!(w.is_zero());
    }

    #[test]
    fn hash_embed_is_unit_norm() {
        let backend = HashEmbedBackend::default();
        let v = backend.embed("lung nodule stable in size").unwrap();
        let norm: f64 = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_identity_is_one() {
        let backend = HashEmbedBackend::default();
        let a = backend.embed("lung nodule stable").unwrap();
        let b = backend.embed("lung nodule stable").unwrap();
        assert_eq!(cosine(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn cosine_orthogonal_basis() {
        let e1 = EmbeddingVector::new(vec![1.0, 0.0]);
        let e2 = EmbeddingVector::new(vec![0.0, 1.0]);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        let v = EmbeddingVector::new(vec![0.3, 0.4]);
        let z = EmbeddingVector::zero(2);
        assert_eq!(cosine(&v, &z).unwrap(), 0.0);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        let a = EmbeddingVector::new(vec![1.0]);
        let b = EmbeddingVector::new(vec![1.0, 0.0]);
        assert!(matches!(
            cosine(&a, &b),
            Err(BackendError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn live_backend_unreachable_host() {
        let mut config = HttpBackendConfig::new("http://127.0.0.1:1", "m");
        config.retry = RetryPolicy { attempts: 2, base_delay_ms: 1, factor: 1.0 };
        config.timeout = Duration::from_millis(200);
        config.api_key = None;
        let backend = HttpChatBackend::new(config).unwrap();
        let err = backend.chat(&ChatRequest::new("s", "u")).unwrap_err();
        assert!(matches!(err, BackendError::Unavailable(_)));
    }

    #[test]
    fn retry_delay_is_bounded_and_deterministic() {
        let policy = RetryPolicy { attempts: 3, base_delay_ms: 100, factor: 4.0 };
        let d1 = policy.delay(1, 7);
        let d2 = policy.delay(1, 7);
        assert_eq!(d1, d2);
        assert!(d1 <= Duration::from_millis(100));
        assert!(policy.delay(2, 7) <= Duration::from_millis(400));
    }
}
