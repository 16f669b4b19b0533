//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::cot::DEFAULT_MAX_ROUNDS;
use crate::datamodel::TimeUnit;
use crate::error::{Error, Result};
use crate::gene::DEFAULT_MAX_K;
use crate::inference::DEPTH;
use crate::retrieval::{Weights, DEFAULT_K};
use crate::wsi::WsiParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub name: String,
    /// Case table used for bank building and cross-validation.
    pub cases: PathBuf,
    /// Optional held-out cases, inferred against a bank built from all of `cases`.
    #[serde(default)]
    pub holdout: Option<PathBuf>,
    /// `case_id,model_name,risk_score` for every case, held-out ones included.
    pub experts: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneConfig {
    pub max_k: usize,
}

impl Default for GeneConfig {
    fn default() -> Self {
        Self { max_k: DEFAULT_MAX_K }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CotConfig {
    pub max_rounds: u32,
}

impl Default for CotConfig {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub w_wsi: f64,
    pub w_gene: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let w = Weights::default();
        Self {
            k: DEFAULT_K,
            w_wsi: w.w_wsi,
            w_gene: w.w_gene,
        }
    }
}

impl RetrievalConfig {
    pub fn weights(&self) -> Weights {
        Weights {
            w_wsi: self.w_wsi,
            w_gene: self.w_gene,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub depth: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { depth: DEPTH }
    }
}

fn default_seed() -> u64 {
    7
}

fn default_jobs() -> usize {
    1
}

fn default_folds() -> usize {
    5
}

fn default_prompts() -> PathBuf {
    "prompts".into()
}

fn default_resources() -> PathBuf {
    "resources".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub time_unit: TimeUnit,
    #[serde(default = "default_prompts")]
    pub prompts_dir: PathBuf,
    /// Holds `category_map.json`, `gene_kb.json` and `wsi_checklist.txt`.
    #[serde(default = "default_resources")]
    pub resources_dir: PathBuf,
    #[serde(rename = "cohort")]
    pub cohorts: Vec<CohortConfig>,
    #[serde(default)]
    pub wsi: WsiParams,
    #[serde(default)]
    pub gene: GeneConfig,
    #[serde(default)]
    pub cot: CotConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub backend: BackendConfig,
}

impl RunConfig {
    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.prompts_dir);
        fix(&mut self.resources_dir);
        for c in &mut self.cohorts {
            fix(&mut c.cases);
            fix(&mut c.experts);
            if let Some(h) = &mut c.holdout {
                fix(h);
            }
        }
        if let Some(f) = &mut self.backend.fixtures {
            fix(f);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.wsi.validate()?;
        self.backend.validate()?;
        self.retrieval.weights().validate()?;
        if self.retrieval.k == 0 {
            return Err(Error::Invalid("retrieval k must be >= 1".into()));
        }
        if self.inference.depth != DEPTH {
            return Err(Error::Invalid(format!(
                "inference depth {} unsupported; only {DEPTH} is implemented",
                self.inference.depth
            )));
        }
        if self.folds < 2 {
            return Err(Error::Invalid("folds must be >= 2".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Invalid("jobs must be >= 1".into()));
        }
        if self.gene.max_k == 0 {
            return Err(Error::Invalid("gene max_k must be >= 1".into()));
        }
        if self.cohorts.is_empty() {
            return Err(Error::Invalid("config lists no cohort".into()));
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.cohorts {
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                return Err(Error::Invalid(format!("bad cohort name `{}`", c.name)));
            }
            if !names.insert(&c.name) {
                return Err(Error::Invalid(format!("duplicate cohort `{}`", c.name)));
            }
        }
        let mut required: Vec<&Path> = vec![&self.prompts_dir, &self.resources_dir];
        for c in &self.cohorts {
            required.push(&c.cases);
            required.push(&c.experts);
            if let Some(h) = &c.holdout {
                required.push(h);
            }
        }
        for p in required {
            if !p.exists() {
                return Err(Error::Invalid(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn cohort(&self, name: Option<&str>) -> Result<&CohortConfig> {
        match name {
            Some(n) => self
                .cohorts
                .iter()
                .find(|c| c.name == n)
                .ok_or_else(|| Error::Invalid(format!("no cohort named `{n}`"))),
            None if self.cohorts.len() == 1 => Ok(&self.cohorts[0]),
            None => Err(Error::Invalid("config has several cohorts; pick one with --cohort".into())),
        }
    }

    pub fn category_map_path(&self) -> PathBuf {
        self.resources_dir.join("category_map.json")
    }

    pub fn gene_kb_path(&self) -> PathBuf {
        self.resources_dir.join("gene_kb.json")
    }

    pub fn checklist_path(&self) -> PathBuf {
        self.resources_dir.join("wsi_checklist.txt")
    }
}

/// SHA-256 of the config file bytes.
pub fn config_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::sidecar::sha256_hex(&bytes))
}
