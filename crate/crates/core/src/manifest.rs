//! Slide manifests: the tiled pyramid produced by preprocessing.
//!
//! ```json
//! {"slide_id": "s1",
//!  "levels": [{"level": 2, "magnification": 10,
//!              "tiles": [{"patch_id": "p1", "x": 0, "y": 0, "w": 512, "h": 512,
//!                         "image": "tiles/p1.png", "embedding_file": "emb.vec",
//!                         "attention": 0.8, "meta": {"lesion": "sarcomatoid"}}]}]}
//! ```
//!
//! Paths are relative to the manifest. Embedding files use the
//! [`sidecar`](crate::sidecar) layout with an `ids` array in the preamble.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{Magnification, PatchRecord};
use crate::error::{Error, Result};
use crate::sidecar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub patch_id: String,
    pub x: u64,
    pub y: u64,
    pub w: u64,
    pub h: u64,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub level: u32,
    pub magnification: f64,
    pub tiles: Vec<TileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub levels: Vec<LevelEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SlideManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: SlideManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        m.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn level(&self, level: u32) -> Option<&LevelEntry> {
        self.levels.iter().find(|l| l.level == level)
    }

    /// All tiles as patch records, with image paths resolved and embeddings
    /// loaded from their sidecar files.
    pub fn patches(&self) -> Result<Vec<PatchRecord>> {
        let mut out = Vec::new();
        for level in &self.levels {
            out.extend(self.level_patches(level.level)?);
        }
        Ok(out)
    }

    pub fn level_patches(&self, level: u32) -> Result<Vec<PatchRecord>> {
        let Some(entry) = self.level(level) else {
            return Ok(Vec::new());
        };
        let magnification = Magnification::from_value(entry.magnification).ok_or_else(|| {
            Error::Invalid(format!(
                "slide {}: unsupported magnification {}",
                self.slide_id, entry.magnification
            ))
        })?;
        let mut embeddings: HashMap<PathBuf, HashMap<String, Vec<f32>>> = HashMap::new();
        let mut out = Vec::with_capacity(entry.tiles.len());
        for t in &entry.tiles {
            let embedding = match &t.embedding_file {
                Some(f) => {
                    let path = self.base_dir.join(f);
                    if !embeddings.contains_key(&path) {
                        embeddings.insert(path.clone(), load_embedding_file(&path)?);
                    }
                    let rows = &embeddings[&path];
                    Some(rows.get(&t.patch_id).cloned().ok_or_else(|| {
                        Error::Invalid(format!("{} has no row for patch {}", path.display(), t.patch_id))
                    })?)
                }
                None => None,
            };
            out.push(PatchRecord {
                patch_id: t.patch_id.clone(),
                level: entry.level,
                magnification,
                x: t.x,
                y: t.y,
                width: t.w,
                height: t.h,
                image_ref: self.base_dir.join(&t.image),
                embedding,
                attention: t.attention,
                metadata: t.meta.clone(),
            });
        }
        Ok(out)
    }
}

/// Embedding sidecar keyed by the `ids` array of its preamble.
pub fn load_embedding_file(path: &Path) -> Result<HashMap<String, Vec<f32>>> {
    let sc = sidecar::read(path)?;
    let ids: Vec<String> = sc
        .preamble
        .get("ids")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::parse(path.display().to_string(), e))?
        .ok_or_else(|| Error::parse(path.display().to_string(), "preamble lacks `ids`"))?;
    if ids.len() != sc.rows.len() {
        return Err(Error::parse(
            path.display().to_string(),
            format!("{} ids for {} rows", ids.len(), sc.rows.len()),
        ));
    }
    Ok(ids.into_iter().zip(sc.rows).collect())
}

pub fn write_embedding_file(path: &Path, ids: &[String], rows: &[Vec<f32>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut pre = serde_json::Map::new();
    pre.insert("ids".into(), serde_json::json!(ids));
    sidecar::write(path, pre, dim, rows)
}

/// A re-tiling window in level-1 pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x: u64,
    pub y: u64,
    pub w: u64,
    pub h: u64,
}

/// Non-overlapping `size`×`size` windows covering a parent tile at level 1.
/// A trailing strip narrower than `min_strip` is dropped; a wider one becomes
/// a partial window.
pub fn subtile_windows(parent: &PatchRecord, size: u64, min_strip: u64) -> Vec<Window> {
    let scale = u64::from(parent.magnification.downsample());
    let (x0, y0) = (parent.x * scale, parent.y * scale);
    let (w, h) = (parent.width * scale, parent.height * scale);
    let spans = |extent: u64| -> Vec<(u64, u64)> {
        let mut v = Vec::new();
        let mut off = 0;
        while off < extent {
            let len = size.min(extent - off);
            if len == size || len >= min_strip {
                v.push((off, len));
            }
            off += size;
        }
        v
    };
    let cols = spans(w);
    spans(h)
        .into_iter()
        .flat_map(|(oy, hh)| {
            cols.iter().map(move |&(ox, ww)| Window {
                x: x0 + ox,
                y: y0 + oy,
                w: ww,
                h: hh,
            })
        })
        .collect()
}

/// Level-1 tiles whose origin coincides with one of the parent's windows,
/// in window order.
pub fn match_subtiles<'a>(windows: &[Window], level1: &'a [PatchRecord]) -> Vec<&'a PatchRecord> {
    windows
        .iter()
        .filter_map(|w| level1.iter().find(|p| p.x == w.x && p.y == w.y))
        .collect()
}
