//! Gene-stratified analysis over the six functional categories.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backend::{ask_parsed, Gateway, PromptRequest};
use crate::datamodel::{GeneCategory, GeneCategoryStats, GeneProfile, GeneRecord, Report, ReportSource};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_K: usize = 10;

/// Gene symbol to category. Built from per-category symbol lists; a symbol
/// listed under two categories stays with the first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryMap {
    map: HashMap<String, GeneCategory>,
}

impl CategoryMap {
    pub fn from_lists(lists: &IndexMap<String, Vec<String>>) -> Result<(Self, Vec<String>)> {
        let mut map: HashMap<String, GeneCategory> = HashMap::new();
        let mut warnings = Vec::new();
        for (key, symbols) in lists {
            let cat = GeneCategory::from_key(key)
                .ok_or_else(|| Error::Invalid(format!("unknown gene category `{key}`")))?;
            for s in symbols {
                match map.get(s) {
                    Some(prev) if *prev != cat => warnings.push(format!(
                        "{s} listed under {} and {}; keeping {}",
                        prev.key(),
                        cat.key(),
                        prev.key()
                    )),
                    Some(_) => {}
                    None => {
                        map.insert(s.clone(), cat);
                    }
                }
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((Self { map }, warnings))
    }

    /// JSON object of category key to symbol list, read in file order.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lists: IndexMap<String, Vec<String>> =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Ok(Self::from_lists(&lists)?.0)
    }

    pub fn get(&self, symbol: &str) -> Option<GeneCategory> {
        self.map.get(symbol).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KbEntry {
    pub function_summary: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneKnowledgeBase {
    entries: HashMap<String, KbEntry>,
    alias_of: HashMap<String, String>,
}

impl GeneKnowledgeBase {
    pub fn new(entries: HashMap<String, KbEntry>) -> Self {
        let mut alias_of = HashMap::new();
        for (sym, e) in &entries {
            for a in &e.aliases {
                alias_of.entry(a.to_ascii_uppercase()).or_insert_with(|| sym.clone());
            }
        }
        Self { entries, alias_of }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Ok(Self::new(entries))
    }

    /// Function summary for `symbol` (or one of its aliases); `None` when the
    /// knowledge base has nothing on it.
    pub fn lookup(&self, symbol: &str) -> Option<&KbEntry> {
        self.entries.get(symbol).or_else(|| {
            self.alias_of
                .get(&symbol.to_ascii_uppercase())
                .and_then(|s| self.entries.get(s))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratified {
    /// All six categories, possibly empty, in category order.
    pub subsets: BTreeMap<GeneCategory, Vec<GeneRecord>>,
    /// Genes absent from the category map.
    pub spillover: Vec<GeneRecord>,
    pub warnings: Vec<String>,
}

pub fn stratify(profile: &GeneProfile, cmap: &CategoryMap) -> Stratified {
    let mut subsets: BTreeMap<GeneCategory, Vec<GeneRecord>> =
        GeneCategory::ALL.into_iter().map(|c| (c, Vec::new())).collect();
    let mut spillover = Vec::new();
    for g in &profile.genes {
        match cmap.get(&g.symbol) {
            Some(c) => subsets.get_mut(&c).expect("all categories present").push(g.clone()),
            None => spillover.push(g.clone()),
        }
    }
    let mut warnings = Vec::new();
    if profile.genes.is_empty() {
        warnings.push("gene profile is empty".to_string());
    }
    if !spillover.is_empty() {
        warnings.push(format!("{} genes outside the category map", spillover.len()));
    }
    Stratified {
        subsets,
        spillover,
        warnings,
    }
}

pub fn category_stats(category: GeneCategory, subset: &[GeneRecord]) -> Result<GeneCategoryStats> {
    if subset.is_empty() {
        return Err(Error::EmptyCategory(category.key().to_string()));
    }
    let n = subset.len();
    let mean = subset.iter().map(|g| g.expression).sum::<f64>() / n as f64;
    let mut xs: Vec<f64> = subset.iter().map(|g| g.expression).collect();
    xs.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    };
    let mutated = subset.iter().filter(|g| g.mutated).count();
    Ok(GeneCategoryStats {
        category,
        mean,
        median,
        mutation_ratio: mutated as f64 / n as f64,
        n_genes: n,
    })
}

/// Top `max_k` symbols by |z-score| of expression within the subset, ties
/// broken by symbol. A constant subset ranks purely by symbol.
pub fn zscore_fallback(subset: &[GeneRecord], max_k: usize) -> Vec<String> {
    let n = subset.len() as f64;
    if subset.is_empty() {
        return Vec::new();
    }
    let mean = subset.iter().map(|g| g.expression).sum::<f64>() / n;
    let sd = (subset.iter().map(|g| (g.expression - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut scored: Vec<(f64, &str)> = subset
        .iter()
        .map(|g| {
            let z = if sd > 0.0 { (g.expression - mean) / sd } else { 0.0 };
            (z.abs(), g.symbol.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(max_k).map(|(_, s)| s.to_string()).collect()
}

/// Symbols named in `text` that belong to the subset, in answer order and
/// deduplicated. Returns the kept symbols and the dropped tokens.
pub fn parse_symbol_list(text: &str, subset: &[GeneRecord]) -> (Vec<String>, Vec<String>) {
    let known: HashSet<&str> = subset.iter().map(|g| g.symbol.as_str()).collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for tok in text.split(|c: char| c == ',' || c == ';' || c.is_whitespace()) {
        let tok = tok.trim_matches(|c: char| !c.is_alphanumeric() && c != '-');
        if tok.is_empty() {
            continue;
        }
        if known.contains(tok) {
            if !kept.iter().any(|k| k == tok) {
                kept.push(tok.to_string());
            }
        } else if tok.chars().any(|c| c.is_ascii_uppercase()) && tok.chars().all(|c| !c.is_ascii_lowercase()) {
            dropped.push(tok.to_string());
        }
    }
    (kept, dropped)
}

fn format_stats(s: &GeneCategoryStats) -> String {
    format!(
        "n={}; mean={:.4}; median={:.4}; mutation_ratio={:.4}",
        s.n_genes, s.mean, s.median, s.mutation_ratio
    )
}

fn gene_line(g: &GeneRecord, kb: &GeneKnowledgeBase) -> String {
    let function = kb.lookup(&g.symbol).map_or("no annotation available", |e| e.function_summary.as_str());
    format!(
        "{} expression={:.4} mutated={} function: {function}",
        g.symbol,
        g.expression,
        if g.mutated { "yes" } else { "no" }
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyGeneSelection {
    pub symbols: Vec<String>,
    pub fallback: bool,
    pub warnings: Vec<String>,
}

pub fn select_key_genes(
    stats: &GeneCategoryStats,
    subset: &[GeneRecord],
    kb: &GeneKnowledgeBase,
    gw: &Gateway,
    max_k: usize,
    tag: &str,
) -> Result<KeyGeneSelection> {
    if subset.is_empty() {
        return Err(Error::EmptyCategory(stats.category.key().to_string()));
    }
    let genes = subset.iter().map(|g| gene_line(g, kb)).collect::<Vec<_>>().join("\n");
    let req = PromptRequest::new("gene.select_key_genes.v1")
        .var("category", stats.category.display_name())
        .var("stats", format_stats(stats))
        .var("genes", genes)
        .var("max_k", max_k.to_string())
        .tag(format!("{tag}/select/{}", stats.category.key()));
    let warnings = std::cell::RefCell::new(Vec::new());
    let parsed = ask_parsed(gw, &req, "Gene symbols from the list, comma-separated.", |text| {
        let (kept, dropped) = parse_symbol_list(text, subset);
        for d in dropped {
            warnings.borrow_mut().push(format!("dropped unknown symbol {d}"));
        }
        (!kept.is_empty()).then_some(kept)
    })?;
    let mut warnings = warnings.into_inner();
    let (symbols, fallback) = match parsed {
        Ok(mut s) => {
            s.truncate(max_k);
            (s, false)
        }
        Err(_) => {
            warnings.push(format!("no valid key genes for {}; ranked by |z|", stats.category.key()));
            (zscore_fallback(subset, max_k), true)
        }
    };
    Ok(KeyGeneSelection {
        symbols,
        fallback,
        warnings,
    })
}

pub fn category_report(
    stats: &GeneCategoryStats,
    selected: &[GeneRecord],
    kb: &GeneKnowledgeBase,
    gw: &Gateway,
    subject_id: &str,
    tag: &str,
) -> Result<Report> {
    let genes = selected.iter().map(|g| gene_line(g, kb)).collect::<Vec<_>>().join("\n");
    let req = PromptRequest::new("gene.category_report.v1")
        .var("category", stats.category.display_name())
        .var("stats", format_stats(stats))
        .var("genes", genes)
        .free_text()
        .tag(format!("{tag}/report/{}", stats.category.key()));
    let text = gw.chat_complete(&req)?;
    let mut r = Report::new(text, ReportSource::GeneCategory, subject_id)?;
    let missing: Vec<&str> = selected
        .iter()
        .map(|g| g.symbol.as_str())
        .filter(|s| !r.text.contains(s))
        .collect();
    if !missing.is_empty() {
        log::warn!("{}: report omits {}", stats.category.key(), missing.join(", "));
        r.flag("omits_selected_genes");
    }
    Ok(r)
}

fn placeholder(category: GeneCategory) -> String {
    format!("{}: no profiled genes in this category.", category.display_name())
}

/// `reports` holds one slot per category in category order; `None` marks an
/// empty category. Flagged low-information when fewer than half the
/// categories have a report.
pub fn summarize_gene(
    case_id: &str,
    reports: &[(GeneCategory, Option<Report>)],
    gw: &Gateway,
    tag: &str,
) -> Result<Report> {
    let real = reports.iter().filter(|(_, r)| r.is_some()).count();
    if real == 0 {
        return Err(Error::AllCategoriesEmpty);
    }
    let body = reports
        .iter()
        .map(|(c, r)| match r {
            Some(r) => r.text.clone(),
            None => placeholder(*c),
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    let req = PromptRequest::new("gene.summarize.v1")
        .var("case", case_id)
        .var("category_reports", body)
        .free_text()
        .tag(format!("{tag}/summarize"));
    let text = gw.chat_complete(&req)?;
    let mut r = Report::new(text, ReportSource::GeneSummary, case_id)?;
    if real * 2 < GeneCategory::ALL.len() {
        r.flag("low_information");
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneAnalysis {
    pub case_id: String,
    pub stats: Vec<GeneCategoryStats>,
    pub selected: BTreeMap<GeneCategory, Vec<String>>,
    pub category_reports: Vec<Report>,
    pub summary: Report,
    pub warnings: Vec<String>,
}

pub struct GeneResources {
    pub cmap: CategoryMap,
    pub kb: GeneKnowledgeBase,
    pub max_k: usize,
}

pub fn analyze_genes(case_id: &str, profile: &GeneProfile, res: &GeneResources, gw: &Gateway) -> Result<GeneAnalysis> {
    let tag = format!("{case_id}/gene");
    let strat = stratify(profile, &res.cmap);
    let mut warnings = strat.warnings.clone();
    let mut stats = Vec::new();
    let mut selected = BTreeMap::new();
    let mut slots = Vec::new();
    for (cat, subset) in &strat.subsets {
        if subset.is_empty() {
            slots.push((*cat, None));
            continue;
        }
        let s = category_stats(*cat, subset)?;
        let sel = select_key_genes(&s, subset, &res.kb, gw, res.max_k, &tag)?;
        warnings.extend(sel.warnings);
        let records: Vec<GeneRecord> = sel
            .symbols
            .iter()
            .filter_map(|sym| subset.iter().find(|g| &g.symbol == sym).cloned())
            .collect();
        for g in &records {
            if res.kb.lookup(&g.symbol).is_none() {
                warnings.push(format!("{} not in the knowledge base", g.symbol));
            }
        }
        let report = category_report(&s, &records, &res.kb, gw, case_id, &tag)?;
        selected.insert(*cat, sel.symbols);
        stats.push(s);
        slots.push((*cat, Some(report)));
    }
    let summary = summarize_gene(case_id, &slots, gw, &tag)?;
    Ok(GeneAnalysis {
        case_id: case_id.to_string(),
        stats,
        selected,
        category_reports: slots.into_iter().filter_map(|(_, r)| r).collect(),
        summary,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixtureSet, MockBackend, TemplateStore};

    fn rec(symbol: &str, expression: f64, mutated: bool) -> GeneRecord {
        GeneRecord {
            symbol: symbol.into(),
            expression,
            mutated,
        }
    }

    fn cmap() -> CategoryMap {
        let mut lists = IndexMap::new();
        lists.insert("TumorSuppressor".to_string(), vec!["TP53".to_string(), "RB1".to_string()]);
        lists.insert("Oncogene".to_string(), vec!["MYC".to_string(), "TP53".to_string()]);
        let (m, w) = CategoryMap::from_lists(&lists).unwrap();
        assert_eq!(w.len(), 1);
        m
    }

    fn gw(set: FixtureSet) -> Gateway {
        let templates = TemplateStore::load_dir(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../prompts")).unwrap();
        Gateway::mock(MockBackend::fixtures(set, 8), templates)
    }

    #[test]
    fn first_listed_category_wins() {
        assert_eq!(cmap().get("TP53"), Some(GeneCategory::TumorSuppressor));
    }

    #[test]
    fn stratify_partitions_and_spills() {
        let p = GeneProfile {
            genes: vec![rec("TP53", 1.0, true), rec("MYC", 2.0, false), rec("XYZ1", 0.0, false)],
        };
        let s = stratify(&p, &cmap());
        assert_eq!(s.subsets.len(), 6);
        assert_eq!(s.subsets[&GeneCategory::TumorSuppressor].len(), 1);
        assert_eq!(s.subsets[&GeneCategory::Oncogene].len(), 1);
        assert_eq!(s.spillover.len(), 1);
        assert_eq!(s.warnings.len(), 1);
        let empty = stratify(&GeneProfile::default(), &cmap());
        assert!(empty.subsets.values().all(Vec::is_empty));
        assert_eq!(empty.warnings.len(), 1);
    }

    #[test]
    fn stats_examples() {
        let s = category_stats(
            GeneCategory::Oncogene,
            &[rec("A", 1.0, false), rec("B", 2.0, true), rec("C", 3.0, true), rec("D", 4.0, false)],
        )
        .unwrap();
        assert_eq!((s.mean, s.median, s.mutation_ratio), (2.5, 2.5, 0.5));
        let s = category_stats(GeneCategory::Oncogene, &[rec("A", 7.0, true)]).unwrap();
        assert_eq!((s.mean, s.median, s.mutation_ratio), (7.0, 7.0, 1.0));
        assert!(matches!(category_stats(GeneCategory::Oncogene, &[]), Err(Error::EmptyCategory(_))));
    }

    #[test]
    fn fixture_selection_is_validated() {
        let subset = [rec("TP53", 1.0, true), rec("RB1", 0.5, false), rec("PTEN", 0.1, false)];
        let s = category_stats(GeneCategory::TumorSuppressor, &subset).unwrap();
        let g = gw(FixtureSet::new().with_default("gene.select_key_genes.v1", "TP53, RB1"));
        let sel = select_key_genes(&s, &subset, &GeneKnowledgeBase::default(), &g, 10, "t").unwrap();
        assert_eq!(sel.symbols, ["TP53", "RB1"]);
        assert!(!sel.fallback);
    }

    #[test]
    fn unknown_symbols_trigger_fallback() {
        let subset = [rec("AAA", 0.0, false), rec("BBB", 10.0, false), rec("CCC", 1.0, false)];
        let s = category_stats(GeneCategory::Oncogene, &subset).unwrap();
        let g = gw(
            FixtureSet::new()
                .with_default("gene.select_key_genes.v1", "FAKE1")
                .with_default("common.reformat.v1", "FAKE1"),
        );
        let sel = select_key_genes(&s, &subset, &GeneKnowledgeBase::default(), &g, 2, "t").unwrap();
        assert!(sel.fallback);
        assert_eq!(sel.symbols, zscore_fallback(&subset, 2));
        assert_eq!(sel.symbols[0], "BBB");
    }

    #[test]
    fn constant_subset_falls_back_lexicographically() {
        let subset = [rec("ZZZ", 1.0, false), rec("AAA", 1.0, false), rec("MMM", 1.0, false)];
        assert_eq!(zscore_fallback(&subset, 2), ["AAA", "MMM"]);
    }

    #[test]
    fn summary_needs_a_real_report() {
        let g = gw(FixtureSet::new().with_default("gene.summarize.v1", "summary"));
        let slots: Vec<(GeneCategory, Option<Report>)> = GeneCategory::ALL.into_iter().map(|c| (c, None)).collect();
        assert!(matches!(summarize_gene("c", &slots, &g, "t"), Err(Error::AllCategoriesEmpty)));
        let mut slots = slots;
        slots[0].1 = Some(Report::new("TP53 mutated", ReportSource::GeneCategory, "c").unwrap());
        let r = summarize_gene("c", &slots, &g, "t").unwrap();
        assert_eq!(r.text, "summary");
        assert!(r.has_flag("low_information"));
    }

    #[test]
    fn kb_lookup_by_alias() {
        let mut entries = HashMap::new();
        entries.insert(
            "ERBB2".to_string(),
            KbEntry {
                function_summary: "HER2 kinase".into(),
                aliases: vec!["HER2".into()],
            },
        );
        let kb = GeneKnowledgeBase::new(entries);
        assert_eq!(kb.lookup("her2").unwrap().function_summary, "HER2 kinase");
        assert!(kb.lookup("TP53").is_none());
    }
}
