//! Chain-of-thought generation from a report and its known outcome, and the
//! critique/refine loop that vets it.

use crate::backend::{ask_parsed, Gateway, PromptRequest};
use crate::datamodel::{CoTRecord, Modality, Quality, Report, RiskStratum, SurvivalLabel};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_ROUNDS: u32 = 3;
const WITHHELD: &str = "[withheld]";
const COT_FORMAT: &str =
    "Lines `Risk level: <stratum>`, `Key evidence:` followed by `- ` bullets, `Uncertainty: ...`, `Reasoning: ...`.";

pub fn label_text(label: &SurvivalLabel) -> String {
    if label.event {
        format!("death observed at {:.2} months", label.time_months)
    } else {
        format!("alive at last follow-up, censored at {:.2} months", label.time_months)
    }
}

fn stratum_text(s: RiskStratum) -> String {
    format!("{} ({})", s.name(), s.interval())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCot {
    pub risk_level: RiskStratum,
    pub key_evidence: Vec<String>,
    pub uncertainty: String,
}

pub fn parse_cot(text: &str) -> Option<ParsedCot> {
    let mut risk = None;
    let mut evidence = Vec::new();
    let mut uncertainty = String::new();
    let mut in_evidence = false;
    for line in text.lines() {
        let t = line.trim();
        let lower = t.to_ascii_lowercase();
        if let Some(rest) = strip_field(t, &lower, "risk level") {
            risk = risk.or_else(|| RiskStratum::parse(rest));
            in_evidence = false;
        } else if let Some(rest) = strip_field(t, &lower, "key evidence") {
            in_evidence = true;
            if !rest.is_empty() {
                evidence.push(rest.to_string());
            }
        } else if let Some(rest) = strip_field(t, &lower, "uncertainty") {
            uncertainty = rest.to_string();
            in_evidence = false;
        } else if strip_field(t, &lower, "reasoning").is_some() {
            in_evidence = false;
        } else if in_evidence {
            let item = t.trim_start_matches(['-', '*', '•']).trim();
            if !item.is_empty() {
                evidence.push(item.to_string());
            }
        }
    }
    (!evidence.is_empty()).then_some(ParsedCot {
        risk_level: risk?,
        key_evidence: evidence,
        uncertainty,
    })
}

fn strip_field<'a>(line: &'a str, lower: &str, field: &str) -> Option<&'a str> {
    let l = lower.trim_start_matches(['*', '#', ' ']);
    let offset = lower.len() - l.len();
    if !l.starts_with(field) {
        return None;
    }
    let rest = &line[offset + field.len()..];
    let rest = rest.trim_start_matches('*').trim_start();
    rest.strip_prefix(':').map(|r| r.trim().trim_matches('*').trim())
}

/// Removes the exact survival time from CoT text so that later prompts that
/// must not see the label cannot pick it up through the CoT.
fn redact(text: &str, label: &SurvivalLabel) -> String {
    let mut out = text.to_string();
    for form in [
        format!("{:.2}", label.time_months),
        format!("{:.1}", label.time_months),
        label.time_months.to_string(),
    ] {
        if form.contains('.') {
            out = out.replace(&form, WITHHELD);
        }
    }
    out
}

fn set_risk_line(text: &str, risk: RiskStratum) -> String {
    let mut replaced = false;
    let mut lines: Vec<String> = text
        .lines()
        .map(|l| {
            if !replaced && l.trim().to_ascii_lowercase().starts_with("risk level") {
                replaced = true;
                format!("Risk level: {}", risk.name())
            } else {
                l.to_string()
            }
        })
        .collect();
    if !replaced {
        lines.insert(0, format!("Risk level: {}", risk.name()));
    }
    lines.join("\n")
}

fn ask_cot(gw: &Gateway, req: &PromptRequest, stage: &str) -> Result<(String, ParsedCot)> {
    match ask_parsed(gw, req, COT_FORMAT, |t| parse_cot(t).map(|p| (t.to_string(), p)))? {
        Ok(v) => Ok(v),
        Err(_) => Err(Error::ParseFailure { stage: stage.into() }),
    }
}

fn record(text: String, parsed: ParsedCot, label: &SurvivalLabel, rounds: u32) -> CoTRecord {
    CoTRecord {
        text,
        risk_level: parsed.risk_level,
        key_evidence: parsed.key_evidence,
        uncertainty: parsed.uncertainty,
        quality: Quality::Low,
        rounds,
        force_accept: false,
        risk_forced: false,
        censored_stratum: label.censored_stratum(),
    }
}

/// Hard-sets the risk level to the label's stratum, flagging the record.
fn force_risk(cot: &mut CoTRecord, target: RiskStratum) {
    cot.risk_level = target;
    cot.text = set_risk_line(&cot.text, target);
    cot.risk_forced = true;
}

/// Reverse reasoning from report and label. A risk level that disagrees with
/// the label's stratum triggers one regeneration, then is overwritten.
pub fn generate_cot(report: &Report, label: &SurvivalLabel, modality: Modality, gw: &Gateway, tag: &str) -> Result<CoTRecord> {
    let target = label.stratum();
    let base = PromptRequest::new("cot.generate.v1")
        .var("modality", modality.to_string())
        .var("report", report.text.clone())
        .var("label", label_text(label))
        .var("stratum", stratum_text(target))
        .free_text()
        .tag(format!("{tag}/cot"));
    let (text, parsed) = ask_cot(gw, &base.clone().var("feedback", ""), "cot generation")?;
    let mut cot = record(redact(&text, label), parsed, label, 0);
    if cot.risk_level != target {
        let feedback = format!(
            "Your previous answer gave risk level {}; the outcome corresponds to {}.",
            cot.risk_level.name(),
            target.name()
        );
        let req = base.var("feedback", feedback).tag(format!("{tag}/cot/retry"));
        let (text, parsed) = ask_cot(gw, &req, "cot generation")?;
        cot = record(redact(&text, label), parsed, label, 0);
        if cot.risk_level != target {
            log::warn!("{tag}: CoT risk level {:?} overwritten with {:?}", cot.risk_level, target);
            force_risk(&mut cot, target);
        }
    }
    Ok(cot)
}

pub fn parse_critique(text: &str) -> Option<(Quality, String)> {
    let mut quality = None;
    let mut critique = Vec::new();
    let mut in_critique = false;
    for line in text.lines() {
        let t = line.trim();
        let lower = t.to_ascii_lowercase();
        if let Some(rest) = strip_field(t, &lower, "quality") {
            let w = rest.to_ascii_lowercase();
            let w = w.trim_matches(|c: char| !c.is_ascii_alphabetic());
            quality = quality.or(match w {
                "high" => Some(Quality::High),
                "low" => Some(Quality::Low),
                _ => None,
            });
            in_critique = false;
        } else if let Some(rest) = strip_field(t, &lower, "critique") {
            in_critique = true;
            if !rest.is_empty() {
                critique.push(rest.to_string());
            }
        } else if in_critique && !t.is_empty() {
            critique.push(t.to_string());
        }
    }
    let quality = quality?;
    let critique = match quality {
        Quality::High => String::new(),
        Quality::Low if critique.is_empty() => "(no critique given)".to_string(),
        Quality::Low => critique.join("\n"),
    };
    Some((quality, critique))
}

/// Judges a CoT against its report only; the label never enters this prompt.
pub fn critique_cot(cot: &CoTRecord, report: &Report, modality: Modality, gw: &Gateway, tag: &str) -> Result<(Quality, String)> {
    let req = PromptRequest::new("cot.critique.v1")
        .var("modality", modality.to_string())
        .var("report", report.text.clone())
        .var("cot", cot.text.clone())
        .tag(format!("{tag}/critique"));
    Ok(ask_parsed(gw, &req, "`Quality: low` or `Quality: high`, then `Critique: ...`.", parse_critique)?
        .unwrap_or_else(|_| (Quality::Low, "<unparseable>".to_string())))
}

/// Critique, refine, repeat: at most `max_rounds` refinements and
/// `max_rounds + 1` critiques. The first High verdict wins; otherwise the last
/// revision is kept with `force_accept`.
pub fn refine_loop(
    cot: CoTRecord,
    report: &Report,
    label: &SurvivalLabel,
    modality: Modality,
    gw: &Gateway,
    max_rounds: u32,
    tag: &str,
) -> Result<CoTRecord> {
    let target = label.stratum();
    let mut cot = cot;
    let mut round = 0;
    loop {
        let (quality, critique) = critique_cot(&cot, report, modality, gw, &format!("{tag}/r{round}"))?;
        cot.rounds = round;
        if quality == Quality::High {
            cot.quality = Quality::High;
            return Ok(cot);
        }
        if round == max_rounds {
            cot.quality = Quality::Low;
            cot.force_accept = true;
            return Ok(cot);
        }
        round += 1;
        let req = PromptRequest::new("cot.refine.v1")
            .var("modality", modality.to_string())
            .var("report", report.text.clone())
            .var("label", label_text(label))
            .var("stratum", stratum_text(target))
            .var("cot", cot.text.clone())
            .var("critique", critique)
            .free_text()
            .tag(format!("{tag}/r{round}/refine"));
        match ask_parsed(gw, &req, COT_FORMAT, |t| parse_cot(t).map(|p| (t.to_string(), p)))? {
            Ok((text, parsed)) => {
                let mut next = record(redact(&text, label), parsed, label, round);
                if next.risk_level != target {
                    force_risk(&mut next, target);
                }
                cot = next;
            }
            Err(_) => log::warn!("{tag}: unparseable refinement in round {round}; keeping previous CoT"),
        }
    }
}

/// Generation followed by the refinement loop.
pub fn build_cot(
    report: &Report,
    label: &SurvivalLabel,
    modality: Modality,
    gw: &Gateway,
    max_rounds: u32,
    tag: &str,
) -> Result<CoTRecord> {
    let cot = generate_cot(report, label, modality, gw, tag)?;
    refine_loop(cot, report, label, modality, gw, max_rounds, tag)
}
