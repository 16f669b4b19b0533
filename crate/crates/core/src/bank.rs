//! Append-only case banks: one JSONL file of entries per modality plus a
//! float32 sidecar holding the report embeddings.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datamodel::{BankEntry, CoTRecord, Modality, Report, SurvivalLabel};
use crate::error::{Error, Result};
use crate::sidecar;

pub const SCHEMA_VERSION: u64 = 1;

/// One JSONL line; the embedding lives in the sidecar at `embedding_row`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredEntry {
    case_id: String,
    modality: Modality,
    summarized_report: Report,
    cot: CoTRecord,
    label: SurvivalLabel,
    embedding_row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseBank {
    pub modality: Modality,
    entries: Vec<BankEntry>,
    dim: Option<usize>,
    path: Option<PathBuf>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("emb")
}

/// Conventional file name of a modality's bank inside a bank directory.
pub fn bank_file(dir: &Path, modality: Modality) -> PathBuf {
    dir.join(match modality {
        Modality::Wsi => "wsi_bank.jsonl",
        Modality::Gene => "gene_bank.jsonl",
    })
}

impl CaseBank {
    /// In-memory bank; nothing is written.
    pub fn new(modality: Modality) -> Self {
        Self {
            modality,
            entries: Vec::new(),
            dim: None,
            path: None,
        }
    }

    /// Empty bank persisted at `path`; fails if a bank already exists there.
    pub fn create(path: &Path, modality: Modality) -> Result<Self> {
        if path.exists() {
            return Err(Error::Invalid(format!("bank {} already exists", path.display())));
        }
        let mut bank = Self::new(modality);
        bank.path = Some(path.to_path_buf());
        bank.persist()?;
        Ok(bank)
    }

    pub fn open_or_create(path: &Path, modality: Modality) -> Result<Self> {
        if path.exists() {
            let bank = Self::load(path)?;
            if bank.modality != modality {
                return Err(Error::Invalid(format!(
                    "bank {} holds {} entries, expected {modality}",
                    path.display(),
                    bank.modality
                )));
            }
            Ok(bank)
        } else {
            Self::create(path, modality)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptBank {
            path: path.to_path_buf(),
            reason,
        };
        let jsonl = fs::read(path).map_err(|e| Error::io(path, e))?;
        let side = sidecar::read(&sidecar_path(path))?;
        let pre = &side.preamble;
        let str_field = |k: &str| pre.get(k).and_then(Value::as_str).map(str::to_string);
        if pre.get("schema_version").and_then(Value::as_u64) != Some(SCHEMA_VERSION) {
            return Err(corrupt("unsupported or missing schema_version".into()));
        }
        let payload = sidecar::payload_bytes(&side.rows);
        if str_field("sha256").as_deref() != Some(sidecar::sha256_hex(&payload).as_str()) {
            return Err(corrupt("embedding checksum mismatch".into()));
        }
        if str_field("entries_sha256").as_deref() != Some(sidecar::sha256_hex(&jsonl).as_str()) {
            return Err(corrupt("entry file checksum mismatch".into()));
        }
        let modality = match str_field("modality").as_deref() {
            Some("WSI") => Modality::Wsi,
            Some("Gene") => Modality::Gene,
            other => return Err(corrupt(format!("bad modality {other:?}"))),
        };
        let text = String::from_utf8(jsonl).map_err(|e| corrupt(e.to_string()))?;
        let mut bank = Self::new(modality);
        bank.dim = (!side.rows.is_empty()).then_some(side.dim);
        let mut used = HashSet::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let s: StoredEntry =
                serde_json::from_str(line).map_err(|e| corrupt(format!("line {}: {e}", i + 1)))?;
            let row = side
                .rows
                .get(s.embedding_row)
                .ok_or_else(|| corrupt(format!("line {}: embedding row {} missing", i + 1, s.embedding_row)))?;
            if !used.insert(s.embedding_row) {
                return Err(corrupt(format!("embedding row {} used twice", s.embedding_row)));
            }
            let entry = BankEntry {
                case_id: s.case_id,
                modality: s.modality,
                summarized_report: s.summarized_report,
                cot: s.cot,
                label: s.label,
                report_embedding: row.clone(),
            };
            bank.check(&entry).map_err(|e| corrupt(e.to_string()))?;
            bank.entries.push(entry);
        }
        if bank.entries.len() != side.rows.len() {
            return Err(corrupt(format!(
                "{} entries but {} embedding rows",
                bank.entries.len(),
                side.rows.len()
            )));
        }
        bank.path = Some(path.to_path_buf());
        Ok(bank)
    }

    fn check(&self, entry: &BankEntry) -> Result<()> {
        if entry.modality != self.modality {
            return Err(Error::Invalid(format!(
                "{} entry offered to a {} bank",
                entry.modality, self.modality
            )));
        }
        if let Some(dim) = self.dim {
            if entry.report_embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: entry.report_embedding.len(),
                });
            }
        }
        if self.get(&entry.case_id).is_some() {
            return Err(Error::DuplicateEntry {
                case_id: entry.case_id.clone(),
                modality: entry.modality.to_string(),
            });
        }
        Ok(())
    }

    /// Validates and appends; a file-backed bank is rewritten atomically
    /// before this returns.
    pub fn append(&mut self, entry: BankEntry) -> Result<()> {
        self.check(&entry)?;
        if entry.report_embedding.is_empty() {
            return Err(Error::Invalid("bank entry has an empty embedding".into()));
        }
        self.dim.get_or_insert(entry.report_embedding.len());
        self.entries.push(entry);
        if self.path.is_some() {
            if let Err(e) = self.persist() {
                self.entries.pop();
                if self.entries.is_empty() {
                    self.dim = None;
                }
                return Err(e);
            }
        }
        Ok(())
    }

    /// Writes the bank to `path` and makes it the backing file.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.path = Some(path.to_path_buf());
        self.persist()
    }

    fn persist(&self) -> Result<()> {
        let path = self.path.as_deref().expect("persist needs a path");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut jsonl = String::new();
        for (row, e) in self.entries.iter().enumerate() {
            let stored = StoredEntry {
                case_id: e.case_id.clone(),
                modality: e.modality,
                summarized_report: e.summarized_report.clone(),
                cot: e.cot.clone(),
                label: e.label,
                embedding_row: row,
            };
            jsonl.push_str(&serde_json::to_string(&stored).expect("entry serializes"));
            jsonl.push('\n');
        }
        let rows: Vec<Vec<f32>> = self.entries.iter().map(|e| e.report_embedding.clone()).collect();
        let mut pre = Map::new();
        pre.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
        pre.insert("modality".into(), Value::from(self.modality.to_string()));
        pre.insert("sha256".into(), Value::from(sidecar::sha256_hex(&sidecar::payload_bytes(&rows))));
        pre.insert("entries_sha256".into(), Value::from(sidecar::sha256_hex(jsonl.as_bytes())));

        let tmp = path.with_extension("jsonl.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(jsonl.as_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        sidecar::write(&sidecar_path(path), pre, self.dim.unwrap_or(0), &rows)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, case_id: &str) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }

    pub fn case_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.case_id.as_str())
    }
}

/// A case present in both banks.
#[derive(Debug, Clone, Copy)]
pub struct JointCase<'a> {
    pub wsi: &'a BankEntry,
    pub gene: &'a BankEntry,
}

/// The joint WSI-gene bank, derived on demand and keyed by case id.
pub fn joint_view<'a>(wsi: &'a CaseBank, gene: &'a CaseBank) -> BTreeMap<&'a str, JointCase<'a>> {
    wsi.entries()
        .iter()
        .filter_map(|w| {
            gene.get(&w.case_id)
                .map(|g| (w.case_id.as_str(), JointCase { wsi: w, gene: g }))
        })
        .collect()
}
