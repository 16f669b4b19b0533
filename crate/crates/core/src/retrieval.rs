//! Top-K retrieval of historical cases by weighted multimodal report
//! similarity.

use serde::{Deserialize, Serialize};

use crate::backend::Gateway;
use crate::bank::CaseBank;
use crate::datamodel::{BankEntry, Report};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 3;
const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w_wsi: f64,
    pub w_gene: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { w_wsi: 0.5, w_gene: 0.5 }
    }
}

impl Weights {
    pub fn new(w_wsi: f64, w_gene: f64) -> Result<Self> {
        let w = Self { w_wsi, w_gene };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w_wsi >= 0.0 && self.w_gene >= 0.0 && (self.w_wsi + self.w_gene - 1.0).abs() <= WEIGHT_TOL;
        if ok {
            Ok(())
        } else {
            Err(Error::WeightsNotNormalized(self.w_wsi, self.w_gene))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    /// Sorted case ids; row `i` of both modalities belongs to `case_ids[i]`.
    case_ids: Vec<String>,
    wsi: Vec<BankEntry>,
    gene: Vec<BankEntry>,
    pub weights: Weights,
    /// Cases present in only one bank.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub case_id: String,
    pub score: f64,
    pub wsi: BankEntry,
    pub gene: BankEntry,
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub fn build_index(bank_wsi: &CaseBank, bank_gene: &CaseBank, weights: Weights) -> Result<RetrievalIndex> {
    weights.validate()?;
    let mut case_ids: Vec<String> = bank_wsi
        .case_ids()
        .filter(|c| bank_gene.get(c).is_some())
        .map(str::to_string)
        .collect();
    case_ids.sort();
    if case_ids.is_empty() {
        return Err(Error::NoOverlap);
    }
    let mut warnings = Vec::new();
    for (bank, other) in [(bank_wsi, bank_gene), (bank_gene, bank_wsi)] {
        for c in bank.case_ids().filter(|c| other.get(c).is_none()) {
            warnings.push(format!("{c} has no {} entry; not indexed", other.modality));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let wsi = case_ids.iter().map(|c| bank_wsi.get(c).cloned().expect("in both banks")).collect();
    let gene = case_ids.iter().map(|c| bank_gene.get(c).cloned().expect("in both banks")).collect();
    Ok(RetrievalIndex {
        case_ids,
        wsi,
        gene,
        weights,
        warnings,
    })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.case_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn contains(&self, case_id: &str) -> bool {
        self.case_ids.binary_search_by(|c| c.as_str().cmp(case_id)).is_ok()
    }

    /// Weighted similarity of every indexed case, in index order.
    pub fn scores(&self, e_wsi: &[f32], e_gene: &[f32]) -> Vec<f64> {
        self.wsi
            .iter()
            .zip(&self.gene)
            .map(|(w, g)| {
                self.weights.w_wsi * cosine(e_wsi, &w.report_embedding)
                    + self.weights.w_gene * cosine(e_gene, &g.report_embedding)
            })
            .collect()
    }

    /// Top `k` cases by score, descending, ties by case id. `exclude` drops
    /// one case id (the query itself in leave-one-out use).
    pub fn retrieve_embedded(&self, e_wsi: &[f32], e_gene: &[f32], k: usize, exclude: Option<&str>) -> Result<Vec<Retrieved>> {
        if k == 0 {
            return Err(Error::Invalid("K must be at least 1".into()));
        }
        let scores = self.scores(e_wsi, e_gene);
        let mut order: Vec<usize> = (0..self.len())
            .filter(|&i| Some(self.case_ids[i].as_str()) != exclude)
            .collect();
        if order.is_empty() {
            return Err(Error::EmptyIndex);
        }
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(self.case_ids[a].cmp(&self.case_ids[b])));
        if order.len() < k {
            log::warn!("index holds {} cases, fewer than K = {k}", order.len());
        }
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| Retrieved {
                case_id: self.case_ids[i].clone(),
                score: scores[i],
                wsi: self.wsi[i].clone(),
                gene: self.gene[i].clone(),
            })
            .collect())
    }

    /// Embeds the two test reports and retrieves.
    pub fn retrieve(
        &self,
        wsi_report: &Report,
        gene_report: &Report,
        k: usize,
        gw: &Gateway,
        exclude: Option<&str>,
    ) -> Result<Vec<Retrieved>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let e_wsi = gw.embed_text(&wsi_report.text)?;
        let e_gene = gw.embed_text(&gene_report.text)?;
        self.retrieve_embedded(&e_wsi, &e_gene, k, exclude)
    }
}
