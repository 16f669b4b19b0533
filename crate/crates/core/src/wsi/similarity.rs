//! Pairwise cosine similarity and threshold-based redundancy removal.

use serde::{Deserialize, Serialize};

use crate::datamodel::{is_unit, l2_norm};
use crate::error::{Error, Result};

/// Symmetric `n × n` similarity matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds from a full row-major matrix, symmetrizing by averaging and
    /// forcing the diagonal to 1.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = if i == j { 1.0 } else { 0.5 * (rows[i][j] + rows[j][i]) };
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Largest similarity between `i` and any other item; 0 when `n = 1`.
    pub fn max_off_diagonal(&self, i: usize) -> f64 {
        (0..self.n)
            .filter(|&j| j != i)
            .map(|j| self.get(i, j))
            .reduce(f64::max)
            .unwrap_or(0.0)
    }
}

/// `S_ij = <v_i, v_j>` for unit vectors, clamped to `[-1, 1]`, diagonal 1.
pub fn pairwise_cosine(vectors: &[Vec<f32>]) -> Result<SimilarityMatrix> {
    let n = vectors.len();
    let dim = vectors.first().map_or(0, Vec::len);
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        if !is_unit(v) {
            return Err(Error::Invalid(format!(
                "similarity input must be unit-norm, got norm {}",
                l2_norm(v)
            )));
        }
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum();
            let s = dot.clamp(-1.0, 1.0);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionPolicy {
    /// Keep `i` iff `max_{j != i} S_ij < tau`; drops both members of a
    /// near-duplicate pair.
    #[default]
    Literal,
    /// Scan in priority order, keep `i` iff its similarity to every already
    /// kept item is `< tau`; keeps one representative per near-duplicate group.
    Greedy,
}

/// Descending attention, ties by index.
pub fn attention_order(attention: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    order
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::BadThreshold(tau))
    }
}

/// Returns the kept indices in ascending order. `order` is used by
/// [`SelectionPolicy::Greedy`] only and defaults to `0..n`.
pub fn threshold_select(
    s: &SimilarityMatrix,
    tau: f64,
    policy: SelectionPolicy,
    order: Option<&[usize]>,
) -> Result<Vec<usize>> {
    check_tau(tau)?;
    let n = s.n();
    let mut kept = match policy {
        SelectionPolicy::Literal => (0..n).filter(|&i| s.max_off_diagonal(i) < tau).collect::<Vec<_>>(),
        SelectionPolicy::Greedy => {
            let default_order: Vec<usize> = (0..n).collect();
            let order = order.unwrap_or(&default_order);
            let mut seen = vec![false; n];
            if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::Invalid("greedy order must be a permutation of 0..n".into()));
            }
            let mut kept: Vec<usize> = Vec::new();
            for &i in order {
                // empty max is 0
                let max = kept
                    .iter()
                    .map(|&k| s.get(i, k))
                    .reduce(f64::max)
                    .unwrap_or(0.0);
                if max < tau {
                    kept.push(i);
                }
            }
            kept
        }
    };
    kept.sort_unstable();
    Ok(kept)
}

/// Intersection of the visual and textual selections.
pub fn cos_mine_select(
    visual: &SimilarityMatrix,
    textual: &SimilarityMatrix,
    tau_v: f64,
    tau_t: f64,
    policy: SelectionPolicy,
    order: Option<&[usize]>,
) -> Result<Vec<usize>> {
    if visual.n() != textual.n() {
        return Err(Error::DimensionMismatch {
            expected: visual.n(),
            got: textual.n(),
        });
    }
    let v = threshold_select(visual, tau_v, policy, order)?;
    let t = threshold_select(textual, tau_t, policy, order)?;
    Ok(v.into_iter().filter(|i| t.binary_search(i).is_ok()).collect())
}
