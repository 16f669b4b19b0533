//! Dichotomy-based multi-expert inference: two binary interval decisions,
//! then a month estimate inside the final interval.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backend::{reformat_request, Gateway, PromptRequest};
use crate::datamodel::{
    ExpertPrediction, ExpertStratum, InferenceResult, Interval, Report, ReportSource, RetrievedSummary, RiskStratum,
};
use crate::error::{Error, Result};
use crate::retrieval::{RetrievalIndex, Retrieved};
use crate::survstats::nearest_rank;

pub const DEPTH: usize = 2;
/// Boundary between the two level-1 branches, in months.
pub const LEVEL1_SPLIT: f64 = 24.0;
/// Stand-in midpoint for the unbounded longest-survival interval.
pub const OPEN_INTERVAL_MIDPOINT: f64 = 48.0;
/// Offset below an exclusive upper bound used when clamping.
pub const CLAMP_EPS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuartileBoundaries {
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

/// Nearest-rank quartiles: `q_p = sorted[ceil(p n) - 1]`.
pub fn compute_quartiles(scores: &[f64]) -> Result<QuartileBoundaries> {
    if scores.len() < 4 {
        return Err(Error::TooFewScores(scores.len()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("non-finite risk score {bad}")));
    }
    let mut xs = scores.to_vec();
    xs.sort_by(f64::total_cmp);
    Ok(QuartileBoundaries {
        q25: nearest_rank(&xs, 0.25),
        q50: nearest_rank(&xs, 0.50),
        q75: nearest_rank(&xs, 0.75),
    })
}

/// Higher risk means shorter survival; boundaries are closed from above.
pub fn map_risk_to_stratum(score: f64, q: &QuartileBoundaries) -> RiskStratum {
    if score <= q.q25 {
        RiskStratum::Low
    } else if score <= q.q50 {
        RiskStratum::LowIntermediate
    } else if score <= q.q75 {
        RiskStratum::HighIntermediate
    } else {
        RiskStratum::High
    }
}

/// Per-model quartile boundaries over a reference population.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpertPanel {
    pub boundaries: BTreeMap<String, QuartileBoundaries>,
}

impl ExpertPanel {
    /// Boundaries from the predictions of the `population` cases only.
    /// Models with fewer than four population scores are left out.
    pub fn from_population(preds: &[ExpertPrediction], population: &HashSet<String>) -> Result<Self> {
        let mut by_model: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for p in preds.iter().filter(|p| population.contains(&p.case_id)) {
            by_model.entry(&p.model_name).or_default().push(p.risk_score);
        }
        let mut boundaries = BTreeMap::new();
        for (model, scores) in by_model {
            match compute_quartiles(&scores) {
                Ok(q) => {
                    boundaries.insert(model.to_string(), q);
                }
                Err(Error::TooFewScores(n)) => log::warn!("expert {model}: only {n} reference scores; skipped"),
                Err(e) => return Err(e),
            }
        }
        Ok(Self { boundaries })
    }

    /// Strata of every model that scored `case_id`, in model-name order.
    pub fn strata_for(&self, case_id: &str, preds: &[ExpertPrediction]) -> Result<Vec<ExpertStratum>> {
        let mut out: Vec<ExpertStratum> = preds
            .iter()
            .filter(|p| p.case_id == case_id)
            .filter_map(|p| {
                self.boundaries.get(&p.model_name).map(|q| ExpertStratum {
                    model_name: p.model_name.clone(),
                    risk_score: p.risk_score,
                    stratum: map_risk_to_stratum(p.risk_score, q),
                })
            })
            .collect();
        out.sort_by(|a, b| a.model_name.cmp(&b.model_name));
        out.dedup_by(|a, b| a.model_name == b.model_name);
        if out.is_empty() {
            return Err(Error::MissingExpertPredictions(case_id.to_string()));
        }
        Ok(out)
    }
}

/// The two candidate intervals at `level` (1 or 2) given the level-1 choice.
pub fn level_options(level: usize, prev: Option<u8>) -> [Interval; 2] {
    match (level, prev) {
        (1, _) => [Interval::new(0.0, Some(LEVEL1_SPLIT)), Interval::new(LEVEL1_SPLIT, None)],
        (_, Some(1)) => [RiskStratum::High.interval(), RiskStratum::HighIntermediate.interval()],
        _ => [RiskStratum::LowIntermediate.interval(), RiskStratum::Low.interval()],
    }
}

pub fn final_stratum(y1: u8, y2: u8) -> RiskStratum {
    match (y1, y2) {
        (1, 1) => RiskStratum::High,
        (1, _) => RiskStratum::HighIntermediate,
        (_, 1) => RiskStratum::LowIntermediate,
        _ => RiskStratum::Low,
    }
}

fn interval_label(i: &Interval) -> String {
    i.to_string()
}

/// Reads a choice between two intervals. Accepts the option number, an
/// interval written like `0-12` or `36+`, or a stratum name.
pub fn parse_choice(text: &str, options: &[Interval; 2]) -> Option<u8> {
    let lower = text.to_ascii_lowercase();
    let body = lower
        .rfind("answer")
        .map(|i| &lower[i + "answer".len()..])
        .unwrap_or(&lower);
    let body = body.trim_start_matches([':', ' ', '*']).trim();

    if let Some(first) = body.split(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '+' || c == '.')).find(|t| !t.is_empty()) {
        if first == "1" || first == "2" {
            return Some(if first == "1" { 1 } else { 2 });
        }
        if let Some(k) = match_interval(first, options) {
            return Some(k);
        }
    }
    if let Some(s) = stratum_in(body) {
        let iv = s.interval();
        if let Some(k) = options.iter().position(|o| o.contains_interval(&iv)) {
            return Some(k as u8 + 1);
        }
    }
    None
}

fn match_interval(token: &str, options: &[Interval; 2]) -> Option<u8> {
    let t = token.trim_end_matches("months").trim();
    let parsed = if let Some(lo) = t.strip_suffix('+') {
        Interval::new(lo.parse().ok()?, None)
    } else {
        let (lo, hi) = t.split_once('-')?;
        Interval::new(lo.parse().ok()?, Some(hi.parse().ok()?))
    };
    options.iter().position(|o| *o == parsed).map(|k| k as u8 + 1)
}

fn stratum_in(text: &str) -> Option<RiskStratum> {
    let norm: String = text.chars().filter(|c| c.is_ascii_alphabetic()).collect();
    // longest names first so "low-intermediate" is not read as "low"
    [
        ("highintermediate", RiskStratum::HighIntermediate),
        ("lowintermediate", RiskStratum::LowIntermediate),
        ("high", RiskStratum::High),
        ("low", RiskStratum::Low),
    ]
    .into_iter()
    .filter_map(|(k, s)| norm.find(k).map(|i| (i, k.len(), s)))
    .min_by_key(|(i, len, _)| (*i, std::cmp::Reverse(*len)))
    .map(|(_, _, s)| s)
}

/// Majority vote of the expert strata over the two options. A stratum outside
/// both options counts for the nearer one; ties go to the shorter branch.
pub fn majority_choice(experts: &[ExpertStratum], options: &[Interval; 2]) -> u8 {
    let mut votes = [0usize; 2];
    for e in experts {
        let iv = e.stratum.interval();
        let k = match options.iter().position(|o| o.contains_interval(&iv)) {
            Some(k) => k,
            None if iv.lo < options[0].lo => 0,
            None => 1,
        };
        votes[k] += 1;
    }
    if votes[1] > votes[0] {
        2
    } else {
        1
    }
}

/// Everything the decision prompts condition on.
#[derive(Debug, Clone)]
pub struct InferenceContext {
    pub case_id: String,
    pub wsi_report: Report,
    pub gene_report: Report,
    pub retrieved: Vec<Retrieved>,
    pub experts: Vec<ExpertStratum>,
}

impl InferenceContext {
    pub fn retrieved_block(&self) -> String {
        if self.retrieved.is_empty() {
            return "(none)".into();
        }
        self.retrieved
            .iter()
            .map(|r| {
                let l = r.wsi.label;
                format!(
                    "Case {} (similarity {:.3}): survival {:.1} months, {}.\nPathology: {}\nGenomics: {}\nPathology reasoning:\n{}\nGenomic reasoning:\n{}",
                    r.case_id,
                    r.score,
                    l.time_months,
                    if l.event { "death observed" } else { "censored" },
                    r.wsi.summarized_report.text,
                    r.gene.summarized_report.text,
                    r.wsi.cot.text,
                    r.gene.cot.text
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    pub fn experts_block(&self) -> String {
        self.experts
            .iter()
            .map(|e| format!("{}: risk score {:.3}, stratum {}", e.model_name, e.risk_score, e.stratum))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn request(&self, template: &str) -> PromptRequest {
        PromptRequest::new(template)
            .var("wsi_report", self.wsi_report.text.clone())
            .var("gene_report", self.gene_report.text.clone())
            .var("retrieved", self.retrieved_block())
            .var("experts", self.experts_block())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub choice: u8,
    pub fallback: bool,
}

/// One constrained binary decision; a second unreadable answer falls back to
/// the expert majority.
pub fn dichotomy_step(ctx: &InferenceContext, level: usize, prev: Option<u8>, gw: &Gateway) -> Result<Decision> {
    let options = level_options(level, prev);
    let previous = match prev {
        Some(y) => format!(
            "At the previous level the patient was placed in {}.",
            interval_label(&level_options(1, None)[usize::from(y) - 1])
        ),
        None => String::new(),
    };
    let req = ctx
        .request("infer.dichotomy.v1")
        .var("level", level.to_string())
        .var("option_1", interval_label(&options[0]))
        .var("option_2", interval_label(&options[1]))
        .var("previous", previous)
        .max_tokens(16)
        .tag(format!("{}/infer/level{level}", ctx.case_id));
    let parsed = crate::backend::ask_parsed(gw, &req, "`Answer: 1` or `Answer: 2`", |t| parse_choice(t, &options))?;
    Ok(match parsed {
        Ok(choice) => Decision { choice, fallback: false },
        Err(_) => {
            log::warn!("{}: level {level} decision unreadable; using expert majority", ctx.case_id);
            Decision {
                choice: majority_choice(&ctx.experts, &options),
                fallback: true,
            }
        }
    })
}

/// Month value from a prediction answer: the number after "predicted
/// survival" when present, otherwise the first number.
pub fn parse_months(text: &str) -> Option<f64> {
    let lower = text.to_ascii_lowercase();
    let body = lower.find("predicted survival").map_or(lower.as_str(), |i| &lower[i..]);
    let start = body.find(|c: char| c.is_ascii_digit())?;
    let num: String = body[start..]
        .chars()
        .take_while(|c| c.is_ascii_digit() || *c == '.')
        .collect();
    num.trim_end_matches('.').parse().ok().filter(|v: &f64| v.is_finite())
}

pub fn interval_midpoint(i: &Interval) -> f64 {
    match i.hi {
        Some(hi) => (i.lo + hi) / 2.0,
        None => OPEN_INTERVAL_MIDPOINT,
    }
}

/// Nearest interior point of `[lo, hi)`. Zero is excluded so that the risk
/// score stays finite.
pub fn clamp_to(i: &Interval, t: f64) -> f64 {
    let lo = i.lo.max(CLAMP_EPS);
    match i.hi {
        Some(hi) if t >= hi => hi - CLAMP_EPS,
        _ if t < lo => lo,
        _ => t,
    }
}

fn inside(i: &Interval, t: f64) -> bool {
    t > 0.0 && i.contains(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimePrediction {
    pub months: f64,
    pub flags: Vec<String>,
}

pub fn predict_time(ctx: &InferenceContext, interval: &Interval, decisions: &str, gw: &Gateway) -> Result<TimePrediction> {
    let req = ctx
        .request("infer.predict_time.v1")
        .var("interval", interval_label(interval))
        .var("decisions", decisions)
        .max_tokens(32)
        .tag(format!("{}/infer/time", ctx.case_id));
    let hint = format!("`Predicted survival: <number> months` with the number inside {interval}");
    let first = gw.chat_complete(&req)?;
    let t1 = parse_months(&first);
    if let Some(t) = t1.filter(|t| inside(interval, *t)) {
        return Ok(TimePrediction { months: t, flags: Vec::new() });
    }
    let prompt = gw.templates().render(&req.template_id, &req.variables)?;
    let second = gw.chat_complete(&reformat_request(&req, &prompt, &first, &hint))?;
    let t2 = parse_months(&second);
    Ok(match (t2, t1) {
        (Some(t), _) if inside(interval, t) => TimePrediction { months: t, flags: Vec::new() },
        (Some(t), _) | (None, Some(t)) => TimePrediction {
            months: clamp_to(interval, t),
            flags: vec!["time_clamped".into()],
        },
        (None, None) => TimePrediction {
            months: interval_midpoint(interval),
            flags: vec!["time_fallback".into()],
        },
    })
}

/// `-ln(months / 12)`: zero at one year, decreasing in months.
pub fn risk_score(months: f64) -> Result<f64> {
    if months <= 0.0 || !months.is_finite() {
        return Err(Error::NonPositiveTime(months));
    }
    Ok(-(months / 12.0).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceParams {
    pub k: usize,
}

/// Full inference for one test case whose two summary reports are ready.
/// The case is never among its own retrieved neighbors.
#[allow(clippy::too_many_arguments)]
pub fn run_inference(
    case_id: &str,
    wsi_report: &Report,
    gene_report: &Report,
    index: &RetrievalIndex,
    panel: &ExpertPanel,
    preds: &[ExpertPrediction],
    params: &InferenceParams,
    gw: &Gateway,
) -> Result<InferenceResult> {
    let experts = panel.strata_for(case_id, preds)?;
    let retrieved = index.retrieve(wsi_report, gene_report, params.k, gw, Some(case_id))?;
    let mut flags = Vec::new();
    if retrieved.len() < params.k {
        flags.push(format!("retrieved_{}_of_{}", retrieved.len(), params.k));
    }
    let ctx = InferenceContext {
        case_id: case_id.to_string(),
        wsi_report: wsi_report.clone(),
        gene_report: gene_report.clone(),
        retrieved,
        experts,
    };

    let d1 = dichotomy_step(&ctx, 1, None, gw)?;
    let d2 = dichotomy_step(&ctx, 2, Some(d1.choice), gw)?;
    for (level, d) in [(1, d1), (2, d2)] {
        if d.fallback {
            flags.push(format!("level{level}_expert_fallback"));
        }
    }
    let stratum = final_stratum(d1.choice, d2.choice);
    let interval = stratum.interval();
    let l1 = level_options(1, None)[usize::from(d1.choice) - 1];
    let decisions = format!("Level 1: {l1}. Level 2: {interval}.");
    let pred = predict_time(&ctx, &interval, &decisions, gw)?;
    flags.extend(pred.flags.iter().cloned());
    let risk = risk_score(pred.months)?;

    let reasoning = reasoning_report(&ctx, [d1, d2], &l1, &interval, pred.months, risk, &flags);
    Ok(InferenceResult {
        case_id: case_id.to_string(),
        y: vec![d1.choice, d2.choice],
        final_stratum: stratum,
        final_interval: interval,
        predicted_months: pred.months,
        risk_score: risk,
        wsi_report: wsi_report.clone(),
        gene_report: gene_report.clone(),
        reasoning_report: Report::new(reasoning, ReportSource::Reasoning, case_id)?,
        retrieved_case_ids: ctx.retrieved.iter().map(|r| r.case_id.clone()).collect(),
        retrieved: ctx
            .retrieved
            .iter()
            .map(|r| RetrievedSummary {
                case_id: r.case_id.clone(),
                score: r.score,
                label: r.wsi.label,
            })
            .collect(),
        expert_strata: ctx.experts.clone(),
        flags,
    })
}

fn reasoning_report(
    ctx: &InferenceContext,
    decisions: [Decision; 2],
    l1: &Interval,
    interval: &Interval,
    months: f64,
    risk: f64,
    flags: &[String],
) -> String {
    let mut s = format!("Survival reasoning for case {}\n\n", ctx.case_id);
    s.push_str("Retrieved cases:\n");
    for r in &ctx.retrieved {
        s.push_str(&format!(
            "  {} similarity {:.3}, survival {:.1} months ({})\n",
            r.case_id,
            r.score,
            r.wsi.label.time_months,
            if r.wsi.label.event { "event" } else { "censored" }
        ));
    }
    s.push_str("Expert strata:\n");
    for e in &ctx.experts {
        s.push_str(&format!("  {} risk {:.3} -> {}\n", e.model_name, e.risk_score, e.stratum));
    }
    let how = |d: Decision| if d.fallback { "expert majority" } else { "agent" };
    s.push_str(&format!("Level 1 decision: {} ({l1}, {})\n", decisions[0].choice, how(decisions[0])));
    s.push_str(&format!("Level 2 decision: {} ({interval}, {})\n", decisions[1].choice, how(decisions[1])));
    s.push_str(&format!("Predicted survival: {months:.2} months\nRisk score: {risk:.3}\n"));
    if !flags.is_empty() {
        s.push_str(&format!("Flags: {}\n", flags.join(", ")));
    }
    s
}
