//! Gateway for every model call: chat completion, image description and
//! text embedding.
//!
//! All pipeline stages talk to a [`Gateway`], which renders prompt templates,
//! bounds the number of in-flight requests, and appends one [`TraceEntry`] per
//! response. The actual transport is a [`Backend`]: [`HttpBackend`] for
//! OpenAI-compatible endpoints or [`MockBackend`] for tests and offline runs.

pub mod http;
pub mod mock;
pub mod oracle;
pub mod template;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::is_unit;
use crate::error::{Error, Result};
pub use http::HttpBackend;
pub use mock::{FixtureSet, MockBackend, MockMode};
pub use template::TemplateStore;

pub const TEMPERATURE_EXTRACT: f64 = 0.0;
pub const TEMPERATURE_FREE_TEXT: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub template_id: String,
    pub variables: BTreeMap<String, String>,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Free-form trace label, e.g. `c1/wsi/describe/p7`.
    pub tag: String,
}

impl PromptRequest {
    /// Extraction-style request (temperature 0).
    pub fn new(template_id: impl Into<String>) -> Self {
        Self {
            template_id: template_id.into(),
            variables: BTreeMap::new(),
            max_tokens: 1024,
            temperature: TEMPERATURE_EXTRACT,
            tag: String::new(),
        }
    }

    pub fn var(mut self, key: &str, value: impl Into<String>) -> Self {
        self.variables.insert(key.to_string(), value.into());
        self
    }

    pub fn tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn free_text(mut self) -> Self {
        self.temperature = TEMPERATURE_FREE_TEXT;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }
}

/// SHA-256 over the canonical JSON of the (sorted) variable map.
pub fn vars_hash(vars: &BTreeMap<String, String>) -> String {
    let json = serde_json::to_string(vars).expect("string map serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub struct ImageInput {
    pub bytes: Vec<u8>,
    pub mime: &'static str,
}

impl ImageInput {
    /// Reads a PNG or JPEG file.
    pub fn load(path: &Path) -> Result<Self> {
        let unreadable = |reason: String| Error::UnreadableImage {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| unreadable(e.to_string()))?;
        let mime = match image::guess_format(&bytes) {
            Ok(image::ImageFormat::Png) => "image/png",
            Ok(image::ImageFormat::Jpeg) => "image/jpeg",
            Ok(other) => return Err(unreadable(format!("unsupported format {other:?}"))),
            Err(e) => return Err(unreadable(e.to_string())),
        };
        Ok(Self { bytes, mime })
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &PromptRequest, prompt: &str) -> Result<String>;
    fn describe(&self, req: &PromptRequest, prompt: &str, image: &ImageInput) -> Result<String>;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
    /// Deterministic backends get a logical trace clock instead of wall time.
    fn deterministic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    #[default]
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockModeKind {
    Fixture,
    #[default]
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    pub vision_model: Option<String>,
    pub embedding_model: String,
    /// Requested embedding width for HTTP; `None` accepts the model's native size.
    pub http_embedding_dim: Option<usize>,
    /// Name of the environment variable holding the API key; empty for none.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub backoff_base_secs: f64,
    pub mock_mode: MockModeKind,
    pub mock_dim: usize,
    pub mock_seed: u64,
    pub fixtures: Option<PathBuf>,
    /// Include rendered prompts in the trace (for audits).
    pub trace_prompts: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            vision_model: None,
            embedding_model: "text-embedding-3-large".into(),
            http_embedding_dim: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            max_in_flight: 4,
            backoff_base_secs: 0.5,
            mock_mode: MockModeKind::Oracle,
            mock_dim: 64,
            mock_seed: 0,
            fixtures: None,
            trace_prompts: false,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(Error::Invalid("backend timeout must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Invalid("max_in_flight must be >= 1".into()));
        }
        if self.backoff_base_secs < 0.0 {
            return Err(Error::Invalid("backoff base must be >= 0".into()));
        }
        if self.kind == BackendKind::Mock && self.mock_dim == 0 {
            return Err(Error::Invalid("mock embedding dimension must be >= 1".into()));
        }
        Ok(())
    }

    pub fn build(&self, templates: TemplateStore) -> Result<Gateway> {
        self.validate()?;
        let (backend, dim): (Box<dyn Backend>, Option<usize>) = match self.kind {
            BackendKind::Http => (Box::new(HttpBackend::new(self)?), self.http_embedding_dim),
            BackendKind::Mock => {
                let mode = match self.mock_mode {
                    MockModeKind::Oracle => MockMode::Oracle,
                    MockModeKind::Fixture => {
                        let path = self
                            .fixtures
                            .as_ref()
                            .ok_or_else(|| Error::Invalid("fixture mode needs `fixtures` path".into()))?;
                        MockMode::Fixture(FixtureSet::load_jsonl(path)?)
                    }
                };
                let mock = MockBackend {
                    mode,
                    dim: self.mock_dim,
                    seed: self.mock_seed,
                    latency: None,
                };
                (Box::new(mock), Some(self.mock_dim))
            }
        };
        let mut gw = Gateway::new(backend, templates, self.max_in_flight, dim);
        gw.set_trace_prompts(self.trace_prompts);
        Ok(gw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Seconds since the gateway started, or a call counter for deterministic backends.
    pub ts: f64,
    pub tag: String,
    pub template_id: String,
    pub vars_hash: String,
    pub response_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

struct Limiter {
    state: Mutex<(usize, usize)>,
    cv: Condvar,
    max: usize,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut st = self.state.lock().unwrap();
        while st.0 >= self.max {
            st = self.cv.wait(st).unwrap();
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap();
        st.0 -= 1;
        self.0.cv.notify_one();
    }
}

struct Shared {
    backend: Box<dyn Backend>,
    templates: TemplateStore,
    limiter: Limiter,
    embedding_dim: Option<usize>,
    started: Instant,
}

#[derive(Default)]
struct TraceLog {
    entries: Vec<TraceEntry>,
    calls: u64,
}

/// Cloning shares both the backend and the trace; [`Gateway::fork`] shares the
/// backend and in-flight bound but starts a fresh trace.
#[derive(Clone)]
pub struct Gateway {
    shared: Arc<Shared>,
    trace: Arc<Mutex<TraceLog>>,
    trace_prompts: bool,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>, templates: TemplateStore, max_in_flight: usize, embedding_dim: Option<usize>) -> Self {
        Self {
            shared: Arc::new(Shared {
                backend,
                templates,
                limiter: Limiter {
                    state: Mutex::new((0, 0)),
                    cv: Condvar::new(),
                    max: max_in_flight.max(1),
                },
                embedding_dim,
                started: Instant::now(),
            }),
            trace: Arc::new(Mutex::new(TraceLog::default())),
            trace_prompts: false,
        }
    }

    pub fn mock(mock: MockBackend, templates: TemplateStore) -> Self {
        let dim = mock.dim;
        Self::new(Box::new(mock), templates, 4, Some(dim))
    }

    pub fn set_trace_prompts(&mut self, on: bool) {
        self.trace_prompts = on;
    }

    pub fn fork(&self) -> Gateway {
        Gateway {
            shared: Arc::clone(&self.shared),
            trace: Arc::new(Mutex::new(TraceLog::default())),
            trace_prompts: self.trace_prompts,
        }
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.shared.templates
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.shared.embedding_dim
    }

    pub fn chat_complete(&self, req: &PromptRequest) -> Result<String> {
        let prompt = self.shared.templates.render(&req.template_id, &req.variables)?;
        let text = {
            let _slot = self.shared.limiter.acquire();
            self.shared.backend.complete(req, &prompt)?
        };
        self.finish_text(req, prompt, text)
    }

    pub fn describe_image(&self, image: &Path, req: &PromptRequest) -> Result<String> {
        let input = ImageInput::load(image)?;
        let prompt = self.shared.templates.render(&req.template_id, &req.variables)?;
        let text = {
            let _slot = self.shared.limiter.acquire();
            self.shared.backend.describe(req, &prompt, &input)?
        };
        self.finish_text(req, prompt, text)
    }

    /// Unit-norm embedding of `text`.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let mut v = {
            let _slot = self.shared.limiter.acquire();
            self.shared.backend.embed(text)?
        };
        if let Some(dim) = self.shared.embedding_dim {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        if !is_unit(&v) {
            let n = crate::datamodel::l2_norm(&v);
            if n == 0.0 {
                return Err(Error::Invalid("backend returned a zero embedding".into()));
            }
            v.iter_mut().for_each(|x| *x = (f64::from(*x) / n) as f32);
        }
        let bytes = crate::sidecar::payload_bytes(std::slice::from_ref(&v));
        let text_hash = hex::encode(Sha256::digest(text.as_bytes()));
        self.record("embed", "embed", text_hash, hex::encode(Sha256::digest(&bytes)), None);
        Ok(v)
    }

    fn finish_text(&self, req: &PromptRequest, prompt: String, text: String) -> Result<String> {
        if text.trim().is_empty() {
            return Err(Error::Upstream {
                status: 200,
                body: "empty completion".into(),
            });
        }
        let resp_hash = hex::encode(Sha256::digest(text.as_bytes()));
        let prompt = self.trace_prompts.then_some(prompt);
        self.record(&req.tag, &req.template_id, vars_hash(&req.variables), resp_hash, prompt);
        Ok(text)
    }

    fn record(&self, tag: &str, template_id: &str, vars_hash: String, response_sha256: String, prompt: Option<String>) {
        let mut log = self.trace.lock().unwrap();
        let ts = if self.shared.backend.deterministic() {
            log.calls as f64
        } else {
            self.shared.started.elapsed().as_secs_f64()
        };
        log.calls += 1;
        log.entries.push(TraceEntry {
            ts,
            tag: tag.to_string(),
            template_id: template_id.to_string(),
            vars_hash,
            response_sha256,
            prompt,
        });
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.trace.lock().unwrap().entries.clone()
    }

    /// Highest number of simultaneous backend calls seen so far.
    pub fn peak_in_flight(&self) -> usize {
        self.shared.limiter.state.lock().unwrap().1
    }

    pub fn append_trace(&self, path: &Path) -> Result<()> {
        write_trace(path, &self.trace())
    }
}

pub fn write_trace(path: &Path, entries: &[TraceEntry]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for e in entries {
        buf.push_str(&serde_json::to_string(e).expect("trace entry serializes"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Re-prompt used by every parser: shows the model its previous answer and
/// the required format.
pub fn reformat_request(original: &PromptRequest, original_prompt: &str, previous: &str, format_hint: &str) -> PromptRequest {
    let mut req = PromptRequest::new("common.reformat.v1")
        .var("original_template", original.template_id.clone())
        .var("original_prompt", original_prompt)
        .var("previous_response", previous)
        .var("format_hint", format_hint)
        .tag(format!("{}/reprompt", original.tag));
    for (k, v) in &original.variables {
        req.variables.insert(format!("orig.{k}"), v.clone());
    }
    req
}

/// Asks once, parses, re-prompts once on failure.
pub fn ask_parsed<T>(
    gw: &Gateway,
    req: &PromptRequest,
    format_hint: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<std::result::Result<T, String>> {
    let first = gw.chat_complete(req)?;
    if let Some(v) = parse(&first) {
        return Ok(Ok(v));
    }
    let original_prompt = gw.templates().render(&req.template_id, &req.variables)?;
    let second = gw.chat_complete(&reformat_request(req, &original_prompt, &first, format_hint))?;
    Ok(parse(&second).ok_or(second))
}
