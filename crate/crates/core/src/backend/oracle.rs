//! Rule-based stand-in for the language model, used with synthetic cohorts.
//!
//! Synthetic tiles carry their ground-truth morphology in metadata; every
//! stage below turns its input variables into text the next stage can read,
//! so a hidden per-case severity survives the whole pipeline. Responses are
//! pure functions of `(template_id, variables)`.

use std::collections::BTreeMap;

use crate::datamodel::{Interval, RiskStratum};
use crate::error::{Error, Result};

/// Months at severity 1 and the span exponent base: `t = 2·45^(1−s)`.
const SEVERITY_MIN_MONTHS: f64 = 2.0;
const SEVERITY_SPAN: f64 = 45.0;
/// Per-gene mutation probability is `MUTATION_BASE + MUTATION_SLOPE·s`.
pub const MUTATION_BASE: f64 = 0.1;
pub const MUTATION_SLOPE: f64 = 0.6;
/// Weight of the slide severity when fusing with the genomic index.
const WSI_WEIGHT: f64 = 0.85;

pub fn months_from_severity(s: f64) -> f64 {
    SEVERITY_MIN_MONTHS * SEVERITY_SPAN.powf(1.0 - s.clamp(0.0, 1.0))
}

pub fn severity_from_months(t: f64) -> f64 {
    (1.0 - (t / SEVERITY_MIN_MONTHS).ln() / SEVERITY_SPAN.ln()).clamp(0.0, 1.0)
}

pub fn respond(template_id: &str, vars: &BTreeMap<String, String>) -> Result<String> {
    let v = |k: &str| vars.get(k).map(String::as_str).unwrap_or("");
    let text = match template_id {
        "wsi.describe_patch.v1" => describe_patch(v("patch_id"), v("magnification"), v("metadata")),
        "wsi.global_screen.v1" => global_screen(v("slide_id"), v("metadata")),
        "wsi.confidence.v1" => confidence(v("report")),
        "wsi.extract_attributes.v1" => extract_attributes(
            v("checklist"),
            &[v("global_report"), v("reports_10x"), v("reports_20x")].join("\n"),
        ),
        "wsi.summarize.v1" => summarize_wsi(v("case"), v("structured")),
        "gene.select_key_genes.v1" => select_key_genes(v("genes"), v("max_k")),
        "gene.category_report.v1" => category_report(v("category"), v("stats"), v("genes")),
        "gene.summarize.v1" => summarize_gene(v("case"), v("category_reports")),
        "cot.generate.v1" | "cot.refine.v1" => generate_cot(v("report"), v("stratum")),
        "cot.critique.v1" => critique(v("cot")),
        "infer.dichotomy.v1" => dichotomy(vars),
        "infer.predict_time.v1" => predict_time(vars),
        "common.reformat.v1" => v("previous_response").to_string(),
        other => return Err(Error::UnknownTemplate(other.to_string())),
    };
    Ok(text)
}

fn parse_metadata(line: &str) -> BTreeMap<&str, &str> {
    line.split(';')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect()
}

/// Every number following `key` (case-insensitive) in `text`.
pub fn numbers_after(text: &str, key: &str) -> Vec<f64> {
    let lower = text.to_ascii_lowercase();
    let key = key.to_ascii_lowercase();
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(i) = lower[from..].find(&key) {
        let start = from + i + key.len();
        let rest = lower[start..].trim_start_matches([' ', ':', '=']);
        let num: String = rest
            .chars()
            .take_while(|c| c.is_ascii_digit() || *c == '.' || *c == '-')
            .collect();
        if let Ok(x) = num.trim_end_matches('.').parse::<f64>() {
            out.push(x);
        }
        from = start;
    }
    out
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn yes(meta: &BTreeMap<&str, &str>, key: &str) -> bool {
    meta.get(key).is_some_and(|v| *v == "true")
}

fn morphology(meta: &BTreeMap<&str, &str>) -> String {
    let mut s = String::new();
    let grade = meta.get("grade").copied().unwrap_or("low");
    let pattern = meta.get("pattern").copied().unwrap_or("solid");
    s.push_str(&format!("{grade}-grade urothelial carcinoma with {pattern} architecture. "));
    if let Some(n) = meta.get("nuclei") {
        s.push_str(&format!("Nuclei are {n}. "));
    }
    if let Some(st) = meta.get("stroma") {
        s.push_str(&format!("The stroma is {st}. "));
    }
    if let Some(variant) = meta.get("variant").filter(|v| **v != "none") {
        s.push_str(&format!("A {variant} component is present. "));
    }
    s.push_str(if yes(meta, "perineural") {
        "Perineural invasion is identified. "
    } else {
        "No perineural invasion is seen. "
    });
    s.push_str(if yes(meta, "lvi") {
        "Lymphovascular invasion is present. "
    } else {
        "No lymphovascular invasion. "
    });
    if let Some(n) = meta.get("necrosis") {
        s.push_str(&format!("Necrosis about {n}%. "));
    }
    if let Some(l) = meta.get("lymphocytes") {
        s.push_str(&format!("{l} lymphocytic infiltrate. "));
    }
    s
}

fn describe_patch(patch_id: &str, magnification: &str, metadata: &str) -> String {
    let meta = parse_metadata(metadata);
    let Some(sev) = meta.get("severity") else {
        return format!("Patch {patch_id} at {magnification}: tissue without distinctive features.");
    };
    let mut s = format!("Patch {patch_id} at {magnification}: {}", morphology(&meta));
    if yes(&meta, "ambiguous") {
        s.push_str("Nuclear detail is ambiguous at this magnification. ");
    }
    s.push_str(&format!("Severity index {sev}."));
    s
}

fn global_screen(slide_id: &str, metadata: &str) -> String {
    let meta = parse_metadata(metadata);
    match meta.get("severity") {
        Some(sev) => format!("Overview of slide {slide_id}: {}Severity index {sev}.", morphology(&meta)),
        None => format!("Overview of slide {slide_id}: tumor-bearing tissue, architecture not resolvable at low power."),
    }
}

fn confidence(report: &str) -> String {
    let lower = report.to_ascii_lowercase();
    if lower.contains("ambiguous") {
        "Confidence: low".into()
    } else if lower.contains("severity index") {
        "Confidence: high".into()
    } else {
        "Confidence: medium".into()
    }
}

struct Evidence {
    severity: Option<f64>,
    high_grade: bool,
    perineural: bool,
    lvi: bool,
    necrosis: Option<f64>,
    lymphocytes: Option<String>,
    variants: Vec<&'static str>,
    patterns: Vec<String>,
}

fn gather(text: &str) -> Evidence {
    let lower = text.to_ascii_lowercase();
    let grades_high = lower.matches("high-grade").count();
    let grades_low = lower.matches("low-grade").count();
    let mut patterns: Vec<String> = lower
        .match_indices(" architecture")
        .filter_map(|(i, _)| lower[..i].rsplit(' ').next().map(str::to_string))
        .collect();
    patterns.sort();
    patterns.dedup();
    let lymph = ["dense", "moderate", "sparse"]
        .into_iter()
        .max_by_key(|l| (lower.matches(&format!("{l} lymphocytic")).count(), std::cmp::Reverse(*l)))
        .filter(|l| lower.contains(&format!("{l} lymphocytic")));
    Evidence {
        severity: mean(&numbers_after(text, "severity index")),
        high_grade: grades_high > 0 && grades_high >= grades_low,
        perineural: lower.contains("perineural invasion is identified"),
        lvi: lower.contains("lymphovascular invasion is present"),
        necrosis: numbers_after(text, "necrosis about").into_iter().reduce(f64::max),
        lymphocytes: lymph.map(str::to_string),
        variants: ["sarcomatoid", "micropapillary", "plasmacytoid"]
            .into_iter()
            .filter(|v| lower.contains(&format!("a {v} component is present")))
            .collect(),
        patterns,
    }
}

fn extract_attributes(checklist: &str, reports: &str) -> String {
    let ev = gather(reports);
    let informative = ev.severity.is_some() || !ev.patterns.is_empty();
    let mut out = String::new();
    for line in checklist.lines() {
        let name = line.trim().trim_start_matches(|c: char| c.is_ascii_digit() || c == '.').trim();
        if name.is_empty() {
            continue;
        }
        let key = name.to_ascii_lowercase();
        let value = if !informative {
            "not assessed".to_string()
        } else if key.contains("grade") {
            (if ev.high_grade { "high-grade" } else { "low-grade" }).to_string()
        } else if key.contains("perineural") {
            (if ev.perineural { "present" } else { "absent" }).to_string()
        } else if key.contains("lymphovascular") {
            (if ev.lvi { "present" } else { "absent" }).to_string()
        } else if key.contains("necrosis") {
            ev.necrosis.map_or("not assessed".into(), |n| format!("{n}%"))
        } else if key.contains("lymphocytic") {
            ev.lymphocytes.clone().unwrap_or_else(|| "not assessed".into())
        } else if key.contains("morphology") && !ev.patterns.is_empty() {
            ev.patterns.join(", ")
        } else if key.contains("variant") {
            if ev.variants.is_empty() {
                "none".to_string()
            } else {
                ev.variants.join(", ")
            }
        } else if let Some(v) = ["sarcomatoid", "micropapillary", "plasmacytoid"]
            .into_iter()
            .find(|v| key.contains(v))
        {
            (if ev.variants.contains(&v) { "present" } else { "absent" }).to_string()
        } else {
            "not assessed".to_string()
        };
        out.push_str(&format!("{name}: {value}\n"));
    }
    out.push_str("Summary: ");
    out.push_str(&match ev.severity {
        Some(s) => format!("{}Severity index {s:.3}.", headline(&ev)),
        None if informative => headline(&ev),
        None => "No diagnostic features identified.".to_string(),
    });
    out
}

fn headline(ev: &Evidence) -> String {
    let mut s = format!("{} carcinoma", if ev.high_grade { "high-grade" } else { "low-grade" });
    if ev.perineural {
        s.push_str(" with perineural invasion");
    }
    if ev.lvi {
        s.push_str(if ev.perineural { " and lymphovascular invasion" } else { " with lymphovascular invasion" });
    }
    if !ev.variants.is_empty() {
        s.push_str(&format!("; {} features", ev.variants.join(" and ")));
    }
    s.push_str(". ");
    s
}

fn summarize_wsi(case: &str, structured: &str) -> String {
    let mut found = Vec::new();
    let mut summary = "";
    for line in structured.lines() {
        if let Some((k, v)) = line.split_once(':') {
            let v = v.trim();
            if k.trim() == "Summary" {
                summary = v;
            } else if v != "not assessed" && v != "absent" && v != "none" {
                found.push(format!("{} {v}", k.trim().to_ascii_lowercase()));
            }
        }
    }
    if found.is_empty() {
        return format!("Case {case}: no assessable histologic features. {summary}");
    }
    format!("Case {case}: {}. {summary}", found.join("; "))
}

struct GeneLine<'a> {
    symbol: &'a str,
    expression: f64,
    mutated: bool,
}

/// Lines formatted `SYMBOL expression=<x> mutated=<yes|no> ...`.
fn parse_gene_lines(text: &str) -> Vec<GeneLine<'_>> {
    text.lines()
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            let symbol = parts.next()?.trim_start_matches('-').trim();
            let expression = numbers_after(l, "expression=").into_iter().next()?;
            Some(GeneLine {
                symbol,
                expression,
                mutated: l.contains("mutated=yes"),
            })
        })
        .filter(|g| !g.symbol.is_empty())
        .collect()
}

fn select_key_genes(genes: &str, max_k: &str) -> String {
    let k = max_k.trim().parse::<usize>().unwrap_or(10).min(3);
    let mut lines = parse_gene_lines(genes);
    lines.sort_by(|a, b| {
        b.mutated
            .cmp(&a.mutated)
            .then(b.expression.abs().total_cmp(&a.expression.abs()))
            .then(a.symbol.cmp(b.symbol))
    });
    lines.iter().take(k.max(1)).map(|g| g.symbol).collect::<Vec<_>>().join(", ")
}

fn category_report(category: &str, stats: &str, genes: &str) -> String {
    let ratio = numbers_after(stats, "mutation_ratio=").into_iter().next().unwrap_or(0.0);
    let mean_expr = numbers_after(stats, "mean=").into_iter().next().unwrap_or(0.0);
    let mut s = format!("{category}: mean expression {mean_expr:.3}, mutation ratio {ratio:.3}. Key genes: ");
    let parts: Vec<String> = parse_gene_lines(genes)
        .iter()
        .map(|g| {
            format!(
                "{} ({}, expression {:.2})",
                g.symbol,
                if g.mutated { "mutated" } else { "wild-type" },
                g.expression
            )
        })
        .collect();
    s.push_str(&parts.join(", "));
    s.push('.');
    s
}

fn summarize_gene(case: &str, reports: &str) -> String {
    let ratios = numbers_after(reports, "mutation ratio");
    let index = mean(&ratios).unwrap_or(0.0);
    let mut mutated: Vec<&str> = reports
        .match_indices(" (mutated")
        .filter_map(|(i, _)| reports[..i].rsplit([' ', ':']).next())
        .filter(|s| !s.is_empty())
        .collect();
    mutated.sort_unstable();
    mutated.dedup();
    let altered = if mutated.is_empty() {
        "no key gene alterations".to_string()
    } else {
        format!("altered key genes {}", mutated.join(", "))
    };
    format!("Case {case}: {altered}. Genomic instability index {index:.3}.")
}

fn generate_cot(report: &str, stratum: &str) -> String {
    let name = stratum.split('(').next().unwrap_or(stratum);
    let risk = RiskStratum::parse(name).unwrap_or(RiskStratum::LowIntermediate);
    let evidence: Vec<&str> = report
        .split(". ")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .take(3)
        .collect();
    let mut s = format!("Risk level: {}\nKey evidence:\n", risk.name());
    for e in &evidence {
        s.push_str(&format!("- {}\n", e.trim_end_matches('.')));
    }
    s.push_str(&format!(
        "Uncertainty: findings are summarized from sampled regions only.\nReasoning: the listed findings are consistent with survival in the {} range.",
        risk.interval()
    ));
    s
}

fn critique(cot: &str) -> String {
    let has_risk = cot.lines().any(|l| l.to_ascii_lowercase().starts_with("risk level:"));
    let has_evidence = cot.lines().any(|l| l.trim_start().starts_with("- "));
    if has_risk && has_evidence {
        "Quality: high".into()
    } else {
        "Quality: low\nCritique: the chain of thought lacks a risk level or supporting evidence.".into()
    }
}

/// Severity-based survival estimate from the case's own reports, falling
/// back to the retrieved cases' survival times.
fn estimate_months(vars: &BTreeMap<String, String>) -> f64 {
    let v = |k: &str| vars.get(k).map(String::as_str).unwrap_or("");
    let sw = mean(&numbers_after(v("wsi_report"), "severity index"));
    let sg = mean(&numbers_after(v("gene_report"), "genomic instability index"))
        .map(|y| ((y - MUTATION_BASE) / MUTATION_SLOPE).clamp(0.0, 1.0));
    let s = match (sw, sg) {
        (Some(w), Some(g)) => Some(WSI_WEIGHT * w + (1.0 - WSI_WEIGHT) * g),
        (Some(w), None) => Some(w),
        (None, Some(g)) => Some(g),
        (None, None) => None,
    };
    match s {
        Some(s) => months_from_severity(s),
        None => {
            let mut ts = numbers_after(v("retrieved"), "survival");
            ts.sort_by(f64::total_cmp);
            ts.get(ts.len() / 2).copied().unwrap_or(24.0)
        }
    }
}

fn parse_interval(text: &str) -> Option<Interval> {
    let t = text.trim().trim_end_matches("months").trim();
    if let Some(lo) = t.strip_suffix('+') {
        return Some(Interval { lo: lo.trim().parse().ok()?, hi: None });
    }
    let (lo, hi) = t.split_once('-')?;
    Some(Interval {
        lo: lo.trim().parse().ok()?,
        hi: Some(hi.trim().parse().ok()?),
    })
}

fn dichotomy(vars: &BTreeMap<String, String>) -> String {
    let t = estimate_months(vars);
    let second = vars
        .get("option_2")
        .and_then(|o| parse_interval(o))
        .is_some_and(|i| i.contains(t));
    format!("Answer: {}", if second { 2 } else { 1 })
}

fn predict_time(vars: &BTreeMap<String, String>) -> String {
    let mut t = estimate_months(vars);
    if let Some(i) = vars.get("interval").and_then(|o| parse_interval(o)) {
        t = t.max(i.lo);
        if let Some(hi) = i.hi {
            t = t.min(hi - 0.01);
        }
    }
    format!("Predicted survival: {t:.2} months")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::vars_from;

    #[test]
    fn severity_round_trip() {
        for t in [2.0, 5.16, 12.0, 40.0, 90.0] {
            assert!((months_from_severity(severity_from_months(t)) - t).abs() < 1e-9);
        }
    }

    #[test]
    fn numbers_are_found() {
        assert_eq!(numbers_after("Severity index 0.5. severity index: 0.7.", "severity index"), vec![0.5, 0.7]);
    }

    #[test]
    fn describe_mentions_grade_and_severity() {
        let r = respond(
            "wsi.describe_patch.v1",
            &vars_from(&[
                ("patch_id", "p1"),
                ("magnification", "10x"),
                ("metadata", "grade=high; perineural=true; severity=0.800"),
            ]),
        )
        .unwrap();
        assert!(r.contains("high-grade"));
        assert!(r.contains("Perineural invasion is identified"));
        assert!(r.contains("Severity index 0.800"));
    }

    #[test]
    fn dichotomy_follows_severity() {
        let short = vars_from(&[
            ("wsi_report", "Severity index 0.9."),
            ("gene_report", ""),
            ("option_1", "0-24 months"),
            ("option_2", "24+ months"),
        ]);
        assert_eq!(respond("infer.dichotomy.v1", &short).unwrap(), "Answer: 1");
        let long = vars_from(&[
            ("wsi_report", "Severity index 0.1."),
            ("option_1", "0-24 months"),
            ("option_2", "24+ months"),
        ]);
        assert_eq!(respond("infer.dichotomy.v1", &long).unwrap(), "Answer: 2");
    }

    #[test]
    fn prediction_stays_in_interval() {
        let vars = vars_from(&[("wsi_report", "Severity index 0.95."), ("interval", "12-24 months")]);
        assert_eq!(respond("infer.predict_time.v1", &vars).unwrap(), "Predicted survival: 12.00 months");
    }

    #[test]
    fn gene_summary_index() {
        let r = summarize_gene(
            "c1",
            "Oncogenes: mean expression 1.0, mutation ratio 0.500. Key genes: MYC (mutated, expression 2.00).\n\
             Protein kinases: mean expression 0.1, mutation ratio 0.300. Key genes: EGFR (wild-type, expression 0.10).",
        );
        assert!(r.contains("MYC"));
        assert!(!r.contains("EGFR"));
        assert!(r.contains("Genomic instability index 0.400"));
    }
}
