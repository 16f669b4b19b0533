use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

/// Prompt templates keyed by id (the file stem, e.g. `wsi.summarize.v1`).
/// Placeholders are `{lower_snake}`; any other brace is literal text.
#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    templates: BTreeMap<String, String>,
}

impl TemplateStore {
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut templates = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Invalid(format!("bad template file name {}", path.display())))?
                .to_string();
            let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            templates.insert(id, body);
        }
        Ok(Self { templates })
    }

    pub fn insert(&mut self, id: impl Into<String>, body: impl Into<String>) {
        self.templates.insert(id.into(), body.into());
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn placeholders(&self, id: &str) -> Result<BTreeSet<String>> {
        let body = self
            .templates
            .get(id)
            .ok_or_else(|| Error::UnknownTemplate(id.to_string()))?;
        Ok(scan(body)
            .into_iter()
            .filter_map(|seg| match seg {
                Segment::Placeholder(n) => Some(n.to_string()),
                Segment::Text(_) => None,
            })
            .collect())
    }

    /// Substitutes every placeholder. Extra variables are ignored.
    pub fn render(&self, id: &str, vars: &BTreeMap<String, String>) -> Result<String> {
        let body = self
            .templates
            .get(id)
            .ok_or_else(|| Error::UnknownTemplate(id.to_string()))?;
        let mut out = String::with_capacity(body.len());
        for seg in scan(body) {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Placeholder(name) => match vars.get(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(Error::UnboundPlaceholder {
                            template_id: id.to_string(),
                            name: name.to_string(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

enum Segment<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn scan(body: &str) -> Vec<Segment<'_>> {
    let mut segs = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                if open > 0 {
                    segs.push(Segment::Text(&rest[..open]));
                }
                segs.push(Segment::Placeholder(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                segs.push(Segment::Text(&rest[..=open]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        segs.push(Segment::Text(rest));
    }
    segs
}
