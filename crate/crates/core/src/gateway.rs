//! Chat-completion access with a content-addressed record/replay cache, plus
//! the text utilities that pull JSON objects and boxed verdicts out of model
//! responses.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no recorded response for cache key {0}")]
    CacheMiss(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    MalformedResponse(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("gateway not configured: {0}")]
    NotConfigured(String),
    #[error("replay cache I/O: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    pub model_name: String,
}

impl GenerationParams {
    pub fn new(model_name: impl Into<String>, temperature: f64) -> Self {
        GenerationParams {
            temperature,
            max_tokens: None,
            model_name: model_name.into(),
        }
    }

    pub fn with_temperature(&self, temperature: f64) -> Self {
        GenerationParams {
            temperature,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == Some(0) {
            return Err(GatewayError::InvalidParams("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 over the canonical `(model_name, temperature, prompt)` triple.
/// `max_tokens` is not part of the key.
pub fn cache_key(prompt: &str, params: &GenerationParams) -> String {
    let canonical = json!({
        "model_name": params.model_name,
        "prompt": prompt,
        "temperature": params.temperature,
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(digest)
}

/// One recorded request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub prompt: String,
    pub params: GenerationParams,
    pub response_text: String,
    pub cache_key: String,
}

impl ChatExchange {
    pub fn new(prompt: impl Into<String>, params: GenerationParams, response_text: impl Into<String>) -> Self {
        let prompt = prompt.into();
        let cache_key = cache_key(&prompt, &params);
        ChatExchange {
            prompt,
            params,
            response_text: response_text.into(),
            cache_key,
        }
    }
}

/// Directory of `<cache_key>.json` files, one [`ChatExchange`] each.
///
/// Reads are lock-free; writes go through a temp file and a rename under a
/// mutex so concurrent workers never observe a partial file.
#[derive(Debug)]
pub struct ReplayCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ReplayCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ReplayCache {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn lookup(&self, key: &str) -> Result<Option<ChatExchange>, GatewayError> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(raw) => {
                let exchange: ChatExchange = serde_json::from_str(&raw).map_err(|e| {
                    GatewayError::Cache(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}: {e}", path.display()),
                    ))
                })?;
                Ok(Some(exchange))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn store(&self, exchange: &ChatExchange) -> Result<(), GatewayError> {
        let body = serde_json::to_string_pretty(exchange).expect("exchange serializes");
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let final_path = self.path_for(&exchange.cache_key);
        let tmp_path = self.dir.join(format!(".{}.tmp", exchange.cache_key));
        {
            let mut file = fs::File::create(&tmp_path)?;
            file.write_all(body.as_bytes())?;
            file.sync_all()?;
        }
        fs::rename(tmp_path, final_path)?;
        Ok(())
    }

    /// Records `response_text` as the answer for `(prompt, params)`.
    pub fn insert(&self, prompt: &str, params: &GenerationParams, response_text: &str) -> Result<String, GatewayError> {
        let exchange = ChatExchange::new(prompt, params.clone(), response_text);
        self.store(&exchange)?;
        Ok(exchange.cache_key)
    }
}

/// Anything that can answer a single-turn prompt.
pub trait ChatModel: Send + Sync {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, GatewayError>;
}

impl<F> ChatModel for F
where
    F: Fn(&str, &GenerationParams) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, GatewayError> {
        self(prompt, params)
    }
}

/// HTTP client for a chat-completions endpoint
/// (`POST {base_url}/chat/completions`).
pub struct HttpChatClient {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    max_retries: u32,
    backoff: Duration,
}

impl HttpChatClient {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(HttpChatClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client,
            max_retries: 3,
            backoff: Duration::from_millis(250),
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }

    fn send_once(&self, body: &Value) -> Result<String, Attempt> {
        let mut request = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| Attempt::Retryable(GatewayError::Transport(e.to_string())))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| Attempt::Retryable(GatewayError::Transport(e.to_string())))?;
        if !status.is_success() {
            let err = GatewayError::Endpoint {
                status: status.as_u16(),
                body: text,
            };
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retryable(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(GatewayError::MalformedResponse(e.to_string())))?;
        parsed
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                Attempt::Fatal(GatewayError::MalformedResponse(
                    "missing choices[0].message.content".into(),
                ))
            })
    }
}

enum Attempt {
    Retryable(GatewayError),
    Fatal(GatewayError),
}

impl ChatModel for HttpChatClient {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, GatewayError> {
        let mut body = json!({
            "model": params.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
        });
        if let Some(max) = params.max_tokens {
            body["max_tokens"] = json!(max);
        }
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Ok(content) => return Ok(content),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(e)) => {
                    if attempt >= self.max_retries {
                        return Err(e);
                    }
                    log::warn!("chat request failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Always call the endpoint; nothing is recorded.
    Live,
    /// Call the endpoint and record every response.
    Record,
    /// Serve only recorded responses.
    Replay,
}

/// The single point of contact with the model.
pub struct Gateway {
    mode: CacheMode,
    cache: Option<ReplayCache>,
    transport: Option<Box<dyn ChatModel>>,
}

impl Gateway {
    pub fn live(transport: Box<dyn ChatModel>) -> Self {
        Gateway {
            mode: CacheMode::Live,
            cache: None,
            transport: Some(transport),
        }
    }

    pub fn record(transport: Box<dyn ChatModel>, cache: ReplayCache) -> Self {
        Gateway {
            mode: CacheMode::Record,
            cache: Some(cache),
            transport: Some(transport),
        }
    }

    pub fn replay(cache: ReplayCache) -> Self {
        Gateway {
            mode: CacheMode::Replay,
            cache: Some(cache),
            transport: None,
        }
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn cache(&self) -> Option<&ReplayCache> {
        self.cache.as_ref()
    }
}

impl ChatModel for Gateway {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, GatewayError> {
        params.validate()?;
        match self.mode {
            CacheMode::Replay => {
                let cache = self
                    .cache
                    .as_ref()
                    .ok_or_else(|| GatewayError::NotConfigured("replay mode without cache".into()))?;
                let key = cache_key(prompt, params);
                cache
                    .lookup(&key)?
                    .map(|ex| ex.response_text)
                    .ok_or(GatewayError::CacheMiss(key))
            }
            CacheMode::Live | CacheMode::Record => {
                let transport = self
                    .transport
                    .as_ref()
                    .ok_or_else(|| GatewayError::NotConfigured("no chat endpoint".into()))?;
                let response = transport.complete(prompt, params)?;
                if let (CacheMode::Record, Some(cache)) = (self.mode, &self.cache) {
                    cache.insert(prompt, params, &response)?;
                }
                Ok(response)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no JSON object found in response")]
    NoJsonFound,
    #[error("JSON syntax error: {0}")]
    SyntaxError(String),
}

/// Drops a leading reasoning section that ends with `</think>`.
fn strip_reasoning(response: &str) -> &str {
    match response.rfind("</think>") {
        Some(pos) => &response[pos + "</think>".len()..],
        None => response,
    }
}

/// Returns the first fenced ```json block, or failing that the first
/// brace-balanced object. The result always parses as strict JSON.
pub fn extract_json_block(response: &str) -> Result<String, ExtractError> {
    let body = strip_reasoning(response);
    let candidate = fenced_json(body).or_else(|| balanced_object(body));
    let candidate = candidate.ok_or(ExtractError::NoJsonFound)?;
    serde_json::from_str::<Value>(&candidate).map_err(|e| ExtractError::SyntaxError(e.to_string()))?;
    Ok(candidate)
}

fn fenced_json(body: &str) -> Option<String> {
    let mut search = 0;
    while let Some(rel) = body[search..].find("```") {
        let fence = search + rel;
        let after = &body[fence + 3..];
        let label_end = after.find('\n').unwrap_or(after.len());
        if after[..label_end].trim().eq_ignore_ascii_case("json") {
            let content_start = fence + 3 + label_end;
            let rest = &body[content_start..];
            let content = match rest.find("```") {
                Some(close) => &rest[..close],
                None => rest,
            };
            return Some(content.trim().to_string());
        }
        search = fence + 3;
    }
    None
}

fn balanced_object(body: &str) -> Option<String> {
    let start = body.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in body[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(body[start..start + offset + 1].to_string());
                }
            }
            _ => {}
        }
    }
    // Unclosed: hand back the tail so the strict parse reports a syntax error.
    Some(body[start..].to_string())
}

/// Answer to the four-way triple verification question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    C,
    D,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no verdict found: {0}")]
pub struct NoVerdict(pub String);

/// Reads the letter inside the last `\boxed{...}` of a response.
pub fn extract_boxed(response: &str) -> Result<Verdict, NoVerdict> {
    const MARKER: &str = "\\boxed{";
    let start = response
        .rfind(MARKER)
        .ok_or_else(|| NoVerdict("no \\boxed{} token".into()))?
        + MARKER.len();
    let rest = &response[start..];
    let close = rest
        .find('}')
        .ok_or_else(|| NoVerdict("unterminated \\boxed{".into()))?;
    match rest[..close].trim() {
        "A" => Ok(Verdict::A),
        "B" => Ok(Verdict::B),
        "C" => Ok(Verdict::C),
        "D" => Ok(Verdict::D),
        other => Err(NoVerdict(format!("unexpected boxed content {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn json_block_from_fence() {
        assert_eq!(
            extract_json_block("text ```json\n{\"a\": 1}\n``` tail").unwrap(),
            "{\"a\": 1}"
        );
    }

    #[test]
    fn json_block_from_braces() {
        assert_eq!(
            extract_json_block("prefix {\"a\": {\"b\": 2}} suffix").unwrap(),
            "{\"a\": {\"b\": 2}}"
        );
        assert_eq!(
            extract_json_block("x {\"s\": \"}{\"} y").unwrap(),
            "{\"s\": \"}{\"}"
        );
    }

    #[test]
    fn json_block_failures() {
        assert_eq!(extract_json_block("no braces at all"), Err(ExtractError::NoJsonFound));
        assert!(matches!(
            extract_json_block("```json\n{'a': 1}\n```"),
            Err(ExtractError::SyntaxError(_))
        ));
        assert!(matches!(
            extract_json_block("{\"a\": [1, 2"),
            Err(ExtractError::SyntaxError(_))
        ));
    }

    #[test]
    fn json_block_skips_reasoning() {
        let response = "<think>maybe ```json\n{\"draft\": 1}\n```</think>\n```json\n{\"final\": 2}\n```";
        assert_eq!(extract_json_block(response).unwrap(), "{\"final\": 2}");
    }

    #[test]
    fn boxed_verdicts() {
        assert_eq!(extract_boxed("reasoning … \\boxed{A}"), Ok(Verdict::A));
        assert_eq!(extract_boxed("\\boxed{ D }"), Ok(Verdict::D));
        assert!(extract_boxed("\\boxed{X}").is_err());
        assert!(extract_boxed("the answer is A").is_err());
        assert_eq!(extract_boxed("\\boxed{B} … final: \\boxed{C}"), Ok(Verdict::C));
    }

    #[test]
    fn cache_key_ignores_max_tokens() {
        let mut p = GenerationParams::new("m", 0.0);
        let k1 = cache_key("hello", &p);
        p.max_tokens = Some(5);
        assert_eq!(k1, cache_key("hello", &p));
        assert_ne!(k1, cache_key("hello", &p.with_temperature(0.2)));
        assert_ne!(k1, cache_key("hello!", &p));
        assert_eq!(k1.len(), 64);
    }

    #[test]
    fn params_validation() {
        assert!(GenerationParams::new("m", 2.5).validate().is_err());
        assert!(GenerationParams::new("m", -0.1).validate().is_err());
        assert!(GenerationParams::new("m", 0.2).validate().is_ok());
    }

    #[test]
    fn replay_round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ReplayCache::open(dir.path()).unwrap();
        let params = GenerationParams::new("m", 0.0);
        cache.insert("prompt", &params, "stored ✓ \u{0}").unwrap();
        let gateway = Gateway::replay(cache);
        assert_eq!(gateway.complete("prompt", &params).unwrap(), "stored ✓ \u{0}");
        assert!(matches!(
            gateway.complete("other", &params),
            Err(GatewayError::CacheMiss(_))
        ));
    }

    #[test]
    fn record_mode_writes_through() {
        let dir = tempfile::tempdir().unwrap();
        let model = |p: &str, _: &GenerationParams| Ok::<_, GatewayError>(format!("echo:{p}"));
        let gateway = Gateway::record(Box::new(model), ReplayCache::open(dir.path()).unwrap());
        let params = GenerationParams::new("m", 0.0);
        assert_eq!(gateway.complete("hi", &params).unwrap(), "echo:hi");
        let replay = Gateway::replay(ReplayCache::open(dir.path()).unwrap());
        assert_eq!(replay.complete("hi", &params).unwrap(), "echo:hi");
    }

    proptest! {
        #[test]
        fn extracted_json_always_parses(s in "[ a-z{}\"':,0-9\\[\\]`\n]{0,60}") {
            if let Ok(block) = extract_json_block(&s) {
                prop_assert!(serde_json::from_str::<Value>(&block).is_ok());
            }
        }
    }
}
