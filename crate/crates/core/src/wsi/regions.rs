//! Attention-density region proposal over the ×10 tile grid.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::datamodel::PatchRecord;
use crate::survstats::nearest_rank;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    /// Neighborhood radius in grid units (tile indices).
    pub eps: f64,
    /// Neighbors (self included) needed for a core point; also the minimum region size.
    pub min_pts: usize,
    /// Attention cut as a nearest-rank percentile in (0, 1].
    pub attention_percentile: f64,
}

impl Default for RegionParams {
    fn default() -> Self {
        Self {
            eps: 4.0,
            min_pts: 10,
            attention_percentile: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u64,
    pub y0: u64,
    pub x1: u64,
    pub y1: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: String,
    pub member_ids: Vec<String>,
    /// Level-2 pixel bounds, exclusive on the far edges.
    pub bbox: BoundingBox,
}

/// Density clustering of 2-D points.
///
/// `i` is a core point when at least `min_pts` points (itself included) lie
/// within Euclidean distance `eps`. Clusters are the connected components of
/// core points; a non-core point within `eps` of some core point joins the
/// cluster of the lowest-indexed such core point. Cluster ids follow the
/// lowest core index they contain. Everything else is noise (`None`).
pub fn dbscan(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbors = neighbor_lists(points, eps);
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || label[start].is_some() {
            continue;
        }
        let id = next;
        next += 1;
        label[start] = Some(id);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if core[q] && label[q].is_none() {
                    label[q] = Some(id);
                    queue.push_back(q);
                }
            }
        }
    }
    for i in 0..n {
        if !core[i] {
            label[i] = neighbors[i].iter().copied().filter(|&j| core[j]).min().and_then(|j| label[j]);
        }
    }
    label
}

/// Indices within `eps` of each point (self included), via a uniform grid
/// with cell size `eps`.
fn neighbor_lists(points: &[(f64, f64)], eps: f64) -> Vec<Vec<usize>> {
    let cell = eps.max(f64::MIN_POSITIVE);
    let key = |p: &(f64, f64)| ((p.0 / cell).floor() as i64, (p.1 / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    points
        .iter()
        .map(|p| {
            let (cx, cy) = key(p);
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy)) {
                        for &j in bucket {
                            let q = points[j];
                            let d2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
                            if d2 <= eps2 {
                                out.push(j);
                            }
                        }
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// Tile-grid coordinates of a patch (pixel offset divided by tile size).
pub fn grid_coords(p: &PatchRecord) -> (f64, f64) {
    (p.x as f64 / p.width.max(1) as f64, p.y as f64 / p.height.max(1) as f64)
}

/// Attention threshold: nearest-rank percentile of all attention scores.
pub fn attention_cut(patches: &[PatchRecord], percentile: f64) -> Option<f64> {
    let mut scores: Vec<f64> = patches.iter().map(|p| p.attention.unwrap_or(0.0)).collect();
    if scores.is_empty() {
        return None;
    }
    scores.sort_by(f64::total_cmp);
    Some(nearest_rank(&scores, percentile))
}

/// Clusters the high-attention patches into candidate regions. Patches
/// without an attention score count as 0. Output is deterministic for a given
/// input order; clusters smaller than `min_pts` are discarded.
pub fn propose_regions(patches: &[PatchRecord], params: &RegionParams) -> Vec<Region> {
    let Some(cut) = attention_cut(patches, params.attention_percentile) else {
        return Vec::new();
    };
    let hot: Vec<&PatchRecord> = patches
        .iter()
        .filter(|p| p.attention.unwrap_or(0.0) >= cut)
        .collect();
    cluster_patches(&hot, params.eps, params.min_pts)
}

/// Clusters the given patches directly, without an attention cut.
pub fn cluster_patches(patches: &[&PatchRecord], eps: f64, min_pts: usize) -> Vec<Region> {
    let points: Vec<(f64, f64)> = patches.iter().map(|p| grid_coords(p)).collect();
    let labels = dbscan(&points, eps, min_pts);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<&PatchRecord>> = vec![Vec::new(); n_clusters];
    for (p, l) in patches.iter().zip(&labels) {
        if let Some(l) = l {
            members[*l].push(p);
        }
    }
    members
        .into_iter()
        .filter(|m| m.len() >= min_pts)
        .enumerate()
        .map(|(k, m)| Region {
            region_id: format!("r{k}"),
            bbox: BoundingBox {
                x0: m.iter().map(|p| p.x).min().unwrap_or(0),
                y0: m.iter().map(|p| p.y).min().unwrap_or(0),
                x1: m.iter().map(|p| p.x + p.width).max().unwrap_or(0),
                y1: m.iter().map(|p| p.y + p.height).max().unwrap_or(0),
            },
            member_ids: m.into_iter().map(|p| p.patch_id.clone()).collect(),
        })
        .collect()
}
