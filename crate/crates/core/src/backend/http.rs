//! OpenAI-compatible chat-completions and embeddings client.

use std::time::Duration;

use base64::Engine;
use rand::Rng;
use serde_json::{json, Value};

use super::{Backend, BackendConfig, ImageInput, PromptRequest};
use crate::error::{Error, Result};

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    vision_model: String,
    embedding_model: String,
    embedding_dim: Option<usize>,
    api_key_env: String,
    max_retries: u32,
    backoff_base: Duration,
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: cfg.endpoint.trim_end_matches('/').to_string(),
            model: cfg.model.clone(),
            vision_model: cfg.vision_model.clone().unwrap_or_else(|| cfg.model.clone()),
            embedding_model: cfg.embedding_model.clone(),
            embedding_dim: cfg.http_embedding_dim,
            api_key_env: cfg.api_key_env.clone(),
            max_retries: cfg.max_retries,
            backoff_base: Duration::from_secs_f64(cfg.backoff_base_secs),
        })
    }

    fn api_key(&self) -> Result<Option<String>> {
        if self.api_key_env.is_empty() {
            return Ok(None);
        }
        std::env::var(&self.api_key_env)
            .map(Some)
            .map_err(|_| Error::MissingApiKey(self.api_key_env.clone()))
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value> {
        let mut req = self.client.post(format!("{}{path}", self.endpoint)).json(body);
        if let Some(key) = self.api_key()? {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(classify)?;
        if !(200..300).contains(&status) {
            return Err(Error::Upstream {
                status,
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| Error::parse("upstream response", e))
    }

    /// Retries transient failures with jittered exponential backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let attempts = self.max_retries + 1;
        let mut delay = self.backoff_base;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.post_once(path, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < attempts => {
                    log::warn!("{path}: attempt {attempt}/{attempts} failed: {e}");
                    let jitter = rand::rng().random_range(0.8..1.2);
                    std::thread::sleep(delay.mul_f64(jitter));
                    delay *= 2;
                }
                Err(Error::Timeout { .. }) => return Err(Error::Timeout { attempts: attempt }),
                Err(e) => return Err(e),
            }
        }
    }

    fn chat(&self, model: &str, content: Value, req: &PromptRequest) -> Result<String> {
        let body = json!({
            "model": model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        let v = self.post("/chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::parse("chat completion", "missing choices[0].message.content"))
    }
}

fn classify(e: reqwest::Error) -> Error {
    if e.is_timeout() {
        Error::Timeout { attempts: 1 }
    } else {
        Error::Transport(e.to_string())
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &PromptRequest, prompt: &str) -> Result<String> {
        self.chat(&self.model, Value::String(prompt.to_string()), req)
    }

    fn describe(&self, req: &PromptRequest, prompt: &str, image: &ImageInput) -> Result<String> {
        let data = base64::engine::general_purpose::STANDARD.encode(&image.bytes);
        let content = json!([
            {"type": "text", "text": prompt},
            {"type": "image_url", "image_url": {"url": format!("data:{};base64,{data}", image.mime)}},
        ]);
        self.chat(&self.vision_model, content, req)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut body = json!({"model": self.embedding_model, "input": text});
        if let Some(d) = self.embedding_dim {
            body["dimensions"] = json!(d);
        }
        let v = self.post("/embeddings", &body)?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::parse("embedding response", "missing data[0].embedding"))?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| Error::parse("embedding response", "non-numeric component"))
            })
            .collect()
    }
}
