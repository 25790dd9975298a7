//! Dynamic degree annotation: an integer 1..=5 describing how much motion a
//! prompt and condition image call for.
//!
//! Degrees come from a chat-completion endpoint when one is configured, and
//! from a stem lexicon otherwise (or when the endpoint keeps failing).
//! Results are cached in an append-only JSONL file keyed by
//! `sha256(prompt || sha256(image bytes))`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_LEXICON: &str = include_str!("../assets/lexicon.tsv");
pub const DEFAULT_REQUEST_TEMPLATE: &str = include_str!("../assets/degree_request.txt");
/// Captioning prompt kept for reference; degree scoring does not use it.
pub const CAPTION_PROMPT: &str = include_str!("../assets/caption_prompt.txt");

pub const DEFAULT_API_KEY_ENV: &str = "DIVE_LLM_API_KEY";
/// Degree assigned by the lexicon when no stem matches.
pub const LEXICON_DEFAULT_DEGREE: u8 = 2;

#[derive(Debug, Error)]
pub enum DegreeError {
    #[error("prompt for item {0:?} is empty")]
    EmptyPrompt(String),
    #[error("lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error("invalid client config: {0}")]
    Config(String),
    #[error("cache io on {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("endpoint returned status {0}")]
    Status(u16),
    #[error("unexpected reply body: {0}")]
    Body(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeSource {
    Llm,
    Lexicon,
    Manifest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeAnnotation {
    pub item_id: String,
    pub degree: u8,
    pub source: DegreeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}

/// Stem table mapping token prefixes to grades.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: Vec<(String, u8)>,
}

impl Lexicon {
    /// Parses `stem<TAB or spaces>grade` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, DegreeError> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(stem), Some(grade), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(DegreeError::Lexicon { line: n + 1, reason: format!("expected `stem grade`, got {raw:?}") });
            };
            let grade: u8 = grade
                .parse()
                .ok()
                .filter(|g| (1..=5).contains(g))
                .ok_or_else(|| DegreeError::Lexicon { line: n + 1, reason: format!("grade {grade:?} not in 1..=5") })?;
            if !stem.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(DegreeError::Lexicon { line: n + 1, reason: format!("stem {stem:?} must be lowercase letters") });
            }
            entries.push((stem.to_string(), grade));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, DegreeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| DegreeError::CacheIo { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Highest grade among stems prefixing any token, else the default of 2.
    pub fn degree(&self, prompt: &str) -> u8 {
        let lower = prompt.to_lowercase();
        lower
            .split(|c: char| !c.is_alphabetic())
            .filter(|t| !t.is_empty())
            .flat_map(|tok| self.entries.iter().filter(move |(s, _)| tok.starts_with(s.as_str())).map(|(_, g)| *g))
            .max()
            .unwrap_or(LEXICON_DEFAULT_DEGREE)
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("shipped lexicon parses")
    }
}

/// Applies the default lexicon.
pub fn lexicon_degree(prompt: &str) -> u8 {
    Lexicon::default().degree(prompt)
}

/// First integer in `reply` whose value is 1..=5. Digit runs are read whole,
/// so "10" is not taken as "1".
pub fn parse_degree(reply: &str) -> Option<u8> {
    let bytes = reply.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let run = &reply[start..i];
            let trimmed = run.trim_start_matches('0');
            if trimmed.len() == 1 {
                let d = trimmed.as_bytes()[0] - b'0';
                if (1..=5).contains(&d) {
                    return Some(d);
                }
            }
        } else {
            i += 1;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "gpt-4o".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 60.0,
            max_retries: 2,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<(), DegreeError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(DegreeError::Config(format!("timeout must be positive, got {}", self.timeout_secs)));
        }
        Ok(())
    }

    pub fn is_configured(&self) -> bool {
        !self.endpoint.trim().is_empty()
    }
}

/// Anything that turns a user message into a reply text.
pub trait ChatClient: Send + Sync {
    fn complete(&self, message: &str) -> Result<String, ClientError>;
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

/// Blocking client for `{model, messages}` chat-completion endpoints.
pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(cfg: &LlmClientConfig) -> Result<Self, DegreeError> {
        cfg.validate()?;
        if !cfg.is_configured() {
            return Err(DegreeError::Config("endpoint is empty".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| DegreeError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
            http,
        })
    }
}

/// Reply text from an OpenAI-style `choices[0].message.content`, or from the
/// first entry of a bare `messages` array.
pub fn extract_reply(body: &serde_json::Value) -> Option<String> {
    let content = body
        .pointer("/choices/0/message/content")
        .or_else(|| body.pointer("/messages/0/content"))
        .or_else(|| body.get("content"))?;
    match content {
        serde_json::Value::String(s) => Some(s.clone()),
        // content parts: [{"type": "text", "text": "..."}]
        serde_json::Value::Array(parts) => {
            parts.iter().find_map(|p| p.get("text").and_then(|t| t.as_str()).map(str::to_owned))
        }
        _ => None,
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, message: &str) -> Result<String, ClientError> {
        let body = ChatRequest { model: &self.model, messages: vec![ChatMessage { role: "user", content: message }] };
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::Status(status.as_u16()));
        }
        let value: serde_json::Value = resp.json().map_err(|e| ClientError::Body(e.to_string()))?;
        extract_reply(&value).ok_or_else(|| ClientError::Body(value.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    #[serde(flatten)]
    annotation: DegreeAnnotation,
}

/// Append-only JSONL degree cache. Appends go through one locked writer.
#[derive(Debug, Default)]
pub struct DegreeCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, DegreeAnnotation>>,
    writer: Mutex<Option<File>>,
}

impl DegreeCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a cache file. Unparseable lines are
    /// reported and ignored.
    pub fn open(path: &Path) -> Result<Self, DegreeError> {
        let io = |source| DegreeError::CacheIo { path: path.to_path_buf(), source };
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(io)?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(c) if (1..=5).contains(&c.annotation.degree) => {
                        entries.insert(c.key, c.annotation);
                    }
                    Ok(_) => tracing::warn!(path = %path.display(), line = n + 1, "cached degree out of range, ignored"),
                    Err(e) => tracing::warn!(path = %path.display(), line = n + 1, error = %e, "bad cache line, ignored"),
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self { path: Some(path.to_path_buf()), entries: Mutex::new(entries), writer: Mutex::new(Some(file)) })
    }

    pub fn get(&self, key: &str) -> Option<DegreeAnnotation> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: &str, annotation: &DegreeAnnotation) -> Result<(), DegreeError> {
        self.entries.lock().expect("cache lock").insert(key.to_string(), annotation.clone());
        let mut writer = self.writer.lock().expect("cache writer lock");
        if let Some(file) = writer.as_mut() {
            let line = serde_json::to_string(&CacheLine { key: key.to_string(), annotation: annotation.clone() })
                .expect("cache line serializes");
            let path = self.path.clone().unwrap_or_default();
            writeln!(file, "{line}").map_err(|source| DegreeError::CacheIo { path, source })?;
        }
        Ok(())
    }
}

/// Cache key: hex SHA-256 of the prompt followed by the image digest. An
/// unreadable image contributes the digest of its path string instead.
pub fn cache_key(prompt: &str, image_path: &Path) -> String {
    let image_digest = match std::fs::read(image_path) {
        Ok(bytes) => Sha256::digest(&bytes),
        Err(_) => Sha256::digest(image_path.to_string_lossy().as_bytes()),
    };
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update(image_digest);
    hex_string(&h.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeRequest {
    pub item_id: String,
    pub prompt: String,
    pub image_path: PathBuf,
}

/// Everything [`annotate_degree`] needs: optional client, cache, lexicon and
/// the request template (`{prompt}` and `{image}` placeholders).
pub struct Annotator {
    pub client: Option<Box<dyn ChatClient>>,
    pub cache: DegreeCache,
    pub lexicon: Lexicon,
    pub template: String,
    pub max_retries: u32,
}

impl Annotator {
    pub fn offline(cache: DegreeCache) -> Self {
        Self { client: None, cache, lexicon: Lexicon::default(), template: DEFAULT_REQUEST_TEMPLATE.into(), max_retries: 0 }
    }

    pub fn with_client(client: Box<dyn ChatClient>, cache: DegreeCache, max_retries: u32) -> Self {
        Self { client: Some(client), ..Self::offline(cache) }.retries(max_retries)
    }

    fn retries(mut self, n: u32) -> Self {
        self.max_retries = n;
        self
    }

    pub fn render(&self, req: &DegreeRequest) -> String {
        self.template.replace("{prompt}", &req.prompt).replace("{image}", &req.image_path.to_string_lossy())
    }
}

/// Cache, then client (with retries), then lexicon.
pub fn annotate_degree(req: &DegreeRequest, annotator: &Annotator) -> Result<DegreeAnnotation, DegreeError> {
    if req.prompt.trim().is_empty() {
        return Err(DegreeError::EmptyPrompt(req.item_id.clone()));
    }
    let key = cache_key(&req.prompt, &req.image_path);
    if let Some(mut hit) = annotator.cache.get(&key) {
        hit.item_id = req.item_id.clone();
        return Ok(hit);
    }

    let lexicon = |reason: Option<&str>| {
        if let Some(r) = reason {
            tracing::warn!(item = %req.item_id, reason = r, "falling back to lexicon degree");
        }
        DegreeAnnotation {
            item_id: req.item_id.clone(),
            degree: annotator.lexicon.degree(&req.prompt),
            source: DegreeSource::Lexicon,
            raw_reply: None,
        }
    };

    let Some(client) = &annotator.client else {
        let ann = lexicon(None);
        annotator.cache.insert(&key, &ann)?;
        return Ok(ann);
    };

    let message = annotator.render(req);
    let mut last_problem = String::new();
    for attempt in 0..=annotator.max_retries {
        match client.complete(&message) {
            Ok(reply) => match parse_degree(&reply) {
                Some(degree) => {
                    let ann = DegreeAnnotation {
                        item_id: req.item_id.clone(),
                        degree,
                        source: DegreeSource::Llm,
                        raw_reply: Some(reply),
                    };
                    annotator.cache.insert(&key, &ann)?;
                    return Ok(ann);
                }
                None => {
                    tracing::debug!(item = %req.item_id, attempt, "reply has no degree");
                    last_problem = format!("unparseable reply {reply:?}");
                }
            },
            Err(e) => {
                tracing::debug!(item = %req.item_id, attempt, error = %e, "degree request failed");
                last_problem = e.to_string();
            }
        }
    }
    // fallbacks are not cached so a later run can still reach the endpoint
    Ok(lexicon(Some(&last_problem)))
}

/// Annotates many items with at most `in_flight` concurrent requests.
/// Identical (prompt, image) pairs are requested once.
pub fn annotate_batch(
    reqs: &[DegreeRequest],
    annotator: &Annotator,
    in_flight: usize,
) -> Result<Vec<DegreeAnnotation>, DegreeError> {
    let keys: Vec<String> = reqs.iter().map(|r| cache_key(&r.prompt, &r.image_path)).collect();
    let mut first_of: HashMap<&str, usize> = HashMap::new();
    for (i, k) in keys.iter().enumerate() {
        first_of.entry(k.as_str()).or_insert(i);
    }
    let mut unique: Vec<usize> = first_of.values().copied().collect();
    unique.sort_unstable();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(in_flight.max(1))
        .build()
        .map_err(|e| DegreeError::Config(e.to_string()))?;
    let done: Vec<(usize, DegreeAnnotation)> = pool.install(|| {
        unique
            .par_iter()
            .map(|&i| annotate_degree(&reqs[i], annotator).map(|a| (i, a)))
            .collect::<Result<_, _>>()
    })?;
    let by_key: HashMap<&str, &DegreeAnnotation> = done.iter().map(|(i, a)| (keys[*i].as_str(), a)).collect();
    Ok(reqs
        .iter()
        .zip(&keys)
        .map(|(r, k)| DegreeAnnotation { item_id: r.item_id.clone(), ..by_key[k.as_str()].clone() })
        .collect())
}
