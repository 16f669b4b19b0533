//! Deterministic stand-in for the model endpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{oracle, vars_hash, Backend, ImageInput, PromptRequest};
use crate::error::{Error, Result};

/// Canned responses keyed by `(template_id, vars_hash)`, with an optional
/// per-template default used when no exact entry exists.
#[derive(Debug, Clone, Default)]
pub struct FixtureSet {
    exact: HashMap<(String, String), String>,
    defaults: HashMap<String, String>,
}

#[derive(Deserialize)]
struct FixtureLine {
    template_id: String,
    #[serde(default)]
    vars: Option<BTreeMap<String, String>>,
    response: String,
}

impl FixtureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, template_id: &str, vars: &[(&str, &str)], response: &str) -> Self {
        self.insert(template_id, vars_from(vars), response);
        self
    }

    pub fn with_default(mut self, template_id: &str, response: &str) -> Self {
        self.defaults.insert(template_id.to_string(), response.to_string());
        self
    }

    pub fn insert(&mut self, template_id: &str, vars: BTreeMap<String, String>, response: &str) {
        self.exact
            .insert((template_id.to_string(), vars_hash(&vars)), response.to_string());
    }

    /// JSONL: `{"template_id": ..., "vars": {...}?, "response": ...}` per line;
    /// lines without `vars` set the template default.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut set = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: FixtureLine = serde_json::from_str(line).map_err(|e| Error::parse(path.display().to_string(), e))?;
            match f.vars {
                Some(vars) => set.insert(&f.template_id, vars, &f.response),
                None => {
                    set.defaults.insert(f.template_id, f.response);
                }
            }
        }
        Ok(set)
    }

    pub fn lookup(&self, template_id: &str, vars: &BTreeMap<String, String>) -> Result<&str> {
        let hash = vars_hash(vars);
        self.exact
            .get(&(template_id.to_string(), hash.clone()))
            .or_else(|| self.defaults.get(template_id))
            .map(String::as_str)
            .ok_or(Error::FixtureMiss {
                template_id: template_id.to_string(),
                vars_hash: hash,
            })
    }
}

pub fn vars_from(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[derive(Debug, Clone)]
pub enum MockMode {
    /// Exact lookup; a miss is an error.
    Fixture(FixtureSet),
    /// Rule-based text derived from the request variables.
    Oracle,
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    pub mode: MockMode,
    pub dim: usize,
    pub seed: u64,
    /// Artificial per-call delay, for exercising the in-flight bound.
    pub latency: Option<Duration>,
}

impl MockBackend {
    pub fn fixtures(set: FixtureSet, dim: usize) -> Self {
        Self {
            mode: MockMode::Fixture(set),
            dim,
            seed: 0,
            latency: None,
        }
    }

    pub fn oracle(dim: usize) -> Self {
        Self {
            mode: MockMode::Oracle,
            dim,
            seed: 0,
            latency: None,
        }
    }

    fn respond(&self, req: &PromptRequest) -> Result<String> {
        if let Some(d) = self.latency {
            std::thread::sleep(d);
        }
        match &self.mode {
            MockMode::Fixture(set) => set.lookup(&req.template_id, &req.variables).map(str::to_string),
            MockMode::Oracle => oracle::respond(&req.template_id, &req.variables),
        }
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &PromptRequest, _prompt: &str) -> Result<String> {
        self.respond(req)
    }

    fn describe(&self, req: &PromptRequest, _prompt: &str, _image: &ImageInput) -> Result<String> {
        self.respond(req)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        Ok(hashed_embedding(text, self.dim, self.seed))
    }

    fn deterministic(&self) -> bool {
        true
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Pseudo-random vector in `[-1, 1)^dim` derived from `(seed, token)`.
pub fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 8];
    key.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(key));
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Bag-of-tokens hashing embedding: the sum of per-token seeded vectors,
/// L2-normalized. Texts without alphanumeric tokens hash as a whole.
pub fn hashed_embedding(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut toks = tokens(text);
    if toks.is_empty() {
        toks.push(text.to_string());
    }
    let mut acc = vec![0.0f64; dim];
    for t in &toks {
        for (a, v) in acc.iter_mut().zip(token_vector(t, dim, seed)) {
            *a += v;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        return e;
    }
    acc.iter().map(|v| (v / norm) as f32).collect()
}
