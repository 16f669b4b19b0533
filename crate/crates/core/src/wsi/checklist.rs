//! WSI attribute checklist and parsing of `Key: value` attribute blocks.

use std::path::Path;

use indexmap::IndexMap;

use crate::datamodel::{StructuredWsiReport, NOT_ASSESSED};
use crate::error::{Error, Result};

/// Shipped default; `resources/wsi_checklist.txt` carries the same list.
pub const DEFAULT_ATTRIBUTES: [&str; 16] = [
    "Tumor Grade",
    "Depth of Invasion",
    "Lymphovascular Invasion (LVI)",
    "Perineural Invasion (PNI)",
    "Lymph Node Metastasis",
    "Margin Status",
    "Tumor Morphology",
    "Carcinoma in Situ (CIS)",
    "Variant Histology",
    "Squamous Differentiation",
    "Glandular Differentiation",
    "Micropapillary Component",
    "Plasmacytoid Component",
    "Sarcomatoid Component",
    "Lymphocytic Infiltration",
    "Necrosis Percentage",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checklist {
    attributes: Vec<String>,
}

impl Default for Checklist {
    fn default() -> Self {
        Self {
            attributes: DEFAULT_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Checklist {
    pub fn new(attributes: Vec<String>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Invalid("checklist is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for a in &attributes {
            if !seen.insert(norm_key(a)) {
                return Err(Error::Invalid(format!("duplicate checklist attribute `{a}`")));
            }
        }
        Ok(Self { attributes })
    }

    /// One attribute per line; blank lines and `#` comments skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn prompt_list(&self) -> String {
        self.attributes
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{}. {a}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn find(&self, key: &str) -> Option<&str> {
        let k = norm_key(key);
        self.attributes
            .iter()
            .find(|a| norm_key(a) == k || norm_full(a) == norm_full(key) || abbreviation(a).is_some_and(|ab| ab == k))
            .map(String::as_str)
    }
}

/// Lowercase alphanumerics with any parenthetical removed:
/// `Perineural Invasion (PNI)` and `perineural invasion` compare equal.
fn norm_key(s: &str) -> String {
    let mut out = String::new();
    let mut depth = 0u32;
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            c if depth == 0 && c.is_alphanumeric() => out.extend(c.to_lowercase()),
            _ => {}
        }
    }
    out
}

/// Normalized text inside the first parenthesis, e.g. `pni`.
fn abbreviation(s: &str) -> Option<String> {
    let open = s.find('(')?;
    let close = s[open..].find(')')? + open;
    Some(norm_full(&s[open + 1..close])).filter(|a| !a.is_empty())
}

fn norm_full(s: &str) -> String {
    s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAttributes {
    pub report: StructuredWsiReport,
    pub warnings: Vec<String>,
}

/// Parses `Key: value` lines against the checklist. Unknown keys are dropped
/// and missing ones filled with "not assessed", each with a warning. A
/// `Summary:` line fills the free-text summary. Returns `None` when no line
/// names a checklist attribute.
pub fn parse_attribute_block(text: &str, checklist: &Checklist) -> Option<ParsedAttributes> {
    let mut found: IndexMap<&str, String> = IndexMap::new();
    let mut summary = String::new();
    let mut warnings = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*', '•']).trim();
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim().trim_matches('*').trim();
        let value = value.trim().trim_matches('*').trim();
        if key.is_empty() {
            continue;
        }
        if norm_key(key) == "summary" {
            summary = value.to_string();
            continue;
        }
        match checklist.find(key) {
            Some(attr) => {
                let v = if value.is_empty() { NOT_ASSESSED } else { value };
                found.entry(attr).or_insert_with(|| v.to_string());
            }
            None => warnings.push(format!("dropped unknown attribute `{key}`")),
        }
    }
    if found.is_empty() {
        return None;
    }
    let mut attributes = IndexMap::new();
    for a in checklist.attributes() {
        let v = match found.get(a.as_str()) {
            Some(v) => v.clone(),
            None => {
                warnings.push(format!("`{a}` missing; set to {NOT_ASSESSED}"));
                NOT_ASSESSED.to_string()
            }
        };
        attributes.insert(a.clone(), v);
    }
    Some(ParsedAttributes {
        report: StructuredWsiReport { attributes, summary },
        warnings,
    })
}
