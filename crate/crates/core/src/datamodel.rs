//! Shared domain types and case-level validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::manifest::SlideManifest;

/// Average days per month used when a cohort declares its times in days.
pub const DAYS_PER_MONTH: f64 = 30.44;

/// Tolerance on the L2 norm of every stored embedding.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time_months: f64,
    /// `true` when death was observed, `false` when right-censored.
    pub event: bool,
}

impl SurvivalLabel {
    pub fn new(time_months: f64, event: bool) -> Result<Self> {
        if !time_months.is_finite() || time_months < 0.0 {
            return Err(Error::Invalid(format!(
                "survival time must be finite and non-negative, got {time_months}"
            )));
        }
        Ok(Self { time_months, event })
    }

    pub fn from_days(days: f64, event: bool) -> Result<Self> {
        Self::new(days / DAYS_PER_MONTH, event)
    }

    pub fn stratum(&self) -> RiskStratum {
        RiskStratum::from_months(self.time_months)
    }

    /// For censored cases the stratum is only a lower bound on the true class.
    pub fn censored_stratum(&self) -> bool {
        !self.event
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskStratum {
    High,
    HighIntermediate,
    LowIntermediate,
    Low,
}

impl RiskStratum {
    /// Ordered from shortest to longest survival.
    pub const ALL: [RiskStratum; 4] = [
        RiskStratum::High,
        RiskStratum::HighIntermediate,
        RiskStratum::LowIntermediate,
        RiskStratum::Low,
    ];

    pub fn interval(self) -> Interval {
        match self {
            RiskStratum::High => Interval::new(0.0, Some(12.0)),
            RiskStratum::HighIntermediate => Interval::new(12.0, Some(24.0)),
            RiskStratum::LowIntermediate => Interval::new(24.0, Some(36.0)),
            RiskStratum::Low => Interval::new(36.0, None),
        }
    }

    pub fn from_months(t: f64) -> Self {
        Self::ALL
            .into_iter()
            .find(|s| s.interval().contains(t))
            .unwrap_or(RiskStratum::Low)
    }

    pub fn name(self) -> &'static str {
        match self {
            RiskStratum::High => "High",
            RiskStratum::HighIntermediate => "High-intermediate",
            RiskStratum::LowIntermediate => "Low-intermediate",
            RiskStratum::Low => "Low",
        }
    }

    /// Accepts the display name and the usual spelling variants.
    pub fn parse(text: &str) -> Option<Self> {
        let norm: String = text
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphabetic())
            .collect();
        let norm = norm.strip_suffix("risk").unwrap_or(&norm);
        match norm {
            "high" => Some(RiskStratum::High),
            "highintermediate" => Some(RiskStratum::HighIntermediate),
            "lowintermediate" => Some(RiskStratum::LowIntermediate),
            "low" => Some(RiskStratum::Low),
            _ => None,
        }
    }

    /// 0 = shortest survival.
    pub fn rank(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RiskStratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.name(), self.interval())
    }
}

/// Half-open month interval `[lo, hi)`; `hi = None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: Option<f64>,
}

impl Interval {
    pub const fn new(lo: f64, hi: Option<f64>) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && self.hi.is_none_or(|hi| t < hi)
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        other.lo >= self.lo
            && match (self.hi, other.hi) {
                (None, _) => true,
                (Some(_), None) => false,
                (Some(a), Some(b)) => b <= a,
            }
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            Some(hi) => write!(f, "{}-{} months", self.lo, hi),
            None => write!(f, "{}+ months", self.lo),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub slide_manifest: PathBuf,
    pub gene_profile: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<SurvivalLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Magnification {
    X2_5,
    X10,
    X20,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::X2_5, Magnification::X10, Magnification::X20];

    pub fn level(self) -> u32 {
        match self {
            Magnification::X2_5 => 3,
            Magnification::X10 => 2,
            Magnification::X20 => 1,
        }
    }

    pub fn from_level(level: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.level() == level)
    }

    pub fn value(self) -> f64 {
        match self {
            Magnification::X2_5 => 2.5,
            Magnification::X10 => 10.0,
            Magnification::X20 => 20.0,
        }
    }

    pub fn from_value(v: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|m| (m.value() - v).abs() < 1e-9)
    }

    /// Pixel scale of this level relative to level 1 (×20).
    pub fn downsample(self) -> u32 {
        match self {
            Magnification::X2_5 => 8,
            Magnification::X10 => 2,
            Magnification::X20 => 1,
        }
    }
}

impl Serialize for Magnification {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Magnification {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Magnification::from_value(v)
            .ok_or_else(|| serde::de::Error::custom(format!("unsupported magnification {v}")))
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x", self.value())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub level: u32,
    pub magnification: Magnification,
    pub x: u64,
    pub y: u64,
    pub width: u64,
    pub height: u64,
    pub image_ref: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<f64>,
    /// Free-form tile annotations carried over from preprocessing.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl PatchRecord {
    /// `key=value` pairs joined by `; `, in key order.
    pub fn metadata_line(&self) -> String {
        self.metadata
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReportSource {
    Global,
    Mag10,
    Mag20,
    WsiSummary,
    GeneCategory,
    GeneSummary,
    Reasoning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Confidence {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub text: String,
    pub source: ReportSource,
    pub subject_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
    /// Processing flags such as `low_information` or `parse_fallback`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl Report {
    pub fn new(text: impl Into<String>, source: ReportSource, subject_id: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Invalid(format!("{source:?} report text is empty")));
        }
        Ok(Self {
            text,
            source,
            subject_id: subject_id.into(),
            confidence: None,
            flags: Vec::new(),
        })
    }

    pub fn set_confidence(&mut self, c: Confidence) -> Result<()> {
        if !matches!(self.source, ReportSource::Mag10 | ReportSource::Mag20) {
            return Err(Error::Invalid(format!(
                "confidence only applies to magnified patch reports, not {:?}",
                self.source
            )));
        }
        self.confidence = Some(c);
        Ok(())
    }

    pub fn flag(&mut self, flag: &str) {
        if !self.has_flag(flag) {
            self.flags.push(flag.to_string());
        }
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }
}

pub const NOT_ASSESSED: &str = "not assessed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredWsiReport {
    pub attributes: IndexMap<String, String>,
    pub summary: String,
}

impl StructuredWsiReport {
    pub fn is_empty(&self) -> bool {
        self.attributes.values().all(|v| v == NOT_ASSESSED)
    }

    /// Renders as `Key: value` lines, checklist order, summary last.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.attributes {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(v);
            out.push('\n');
        }
        out.push_str("Summary: ");
        out.push_str(if self.summary.is_empty() { NOT_ASSESSED } else { &self.summary });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneRecord {
    pub symbol: String,
    pub expression: f64,
    pub mutated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneProfile {
    pub genes: Vec<GeneRecord>,
}

impl GeneProfile {
    /// Reads `symbol<TAB>expression<TAB>mutated(0|1)` lines. Blank lines,
    /// `#` comments and a leading `symbol` header are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text).map_err(|m| Error::parse(path.display().to_string(), m))
    }

    pub fn parse_tsv(text: &str) -> std::result::Result<Self, String> {
        let mut genes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if lineno == 0 && fields[0].eq_ignore_ascii_case("symbol") {
                continue;
            }
            if fields.len() != 3 {
                return Err(format!("line {}: expected 3 tab-separated fields", lineno + 1));
            }
            let expression: f64 = fields[1]
                .trim()
                .parse()
                .map_err(|e| format!("line {}: expression: {e}", lineno + 1))?;
            let mutated = match fields[2].trim() {
                "0" => false,
                "1" => true,
                other => return Err(format!("line {}: mutated must be 0 or 1, got `{other}`", lineno + 1)),
            };
            genes.push(GeneRecord {
                symbol: fields[0].trim().to_string(),
                expression,
                mutated,
            });
        }
        Ok(Self { genes })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("symbol\texpression\tmutated\n");
        for g in &self.genes {
            out.push_str(&format!("{}\t{}\t{}\n", g.symbol, g.expression, u8::from(g.mutated)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GeneCategory {
    TumorSuppressor,
    Oncogene,
    ProteinKinase,
    DifferentiationMarker,
    TranscriptionFactor,
    CytokineGrowthFactor,
}

impl GeneCategory {
    pub const ALL: [GeneCategory; 6] = [
        GeneCategory::TumorSuppressor,
        GeneCategory::Oncogene,
        GeneCategory::ProteinKinase,
        GeneCategory::DifferentiationMarker,
        GeneCategory::TranscriptionFactor,
        GeneCategory::CytokineGrowthFactor,
    ];

    pub fn key(self) -> &'static str {
        match self {
            GeneCategory::TumorSuppressor => "TumorSuppressor",
            GeneCategory::Oncogene => "Oncogene",
            GeneCategory::ProteinKinase => "ProteinKinase",
            GeneCategory::DifferentiationMarker => "DifferentiationMarker",
            GeneCategory::TranscriptionFactor => "TranscriptionFactor",
            GeneCategory::CytokineGrowthFactor => "CytokineGrowthFactor",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            GeneCategory::TumorSuppressor => "Tumor suppressor genes",
            GeneCategory::Oncogene => "Oncogenes",
            GeneCategory::ProteinKinase => "Protein kinases",
            GeneCategory::DifferentiationMarker => "Cell differentiation markers",
            GeneCategory::TranscriptionFactor => "Transcription factors",
            GeneCategory::CytokineGrowthFactor => "Cytokines and growth factors",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.key().eq_ignore_ascii_case(key))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneCategoryStats {
    pub category: GeneCategory,
    pub mean: f64,
    pub median: f64,
    pub mutation_ratio: f64,
    pub n_genes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quality {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTRecord {
    pub text: String,
    pub risk_level: RiskStratum,
    pub key_evidence: Vec<String>,
    pub uncertainty: String,
    pub quality: Quality,
    pub rounds: u32,
    /// Accepted after the refinement budget ran out.
    #[serde(default)]
    pub force_accept: bool,
    /// Risk level overwritten with the label's stratum after a mismatch.
    #[serde(default)]
    pub risk_forced: bool,
    #[serde(default)]
    pub censored_stratum: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "WSI")]
    Wsi,
    Gene,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Wsi => "WSI",
            Modality::Gene => "Gene",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub case_id: String,
    pub modality: Modality,
    pub summarized_report: Report,
    pub cot: CoTRecord,
    pub label: SurvivalLabel,
    pub report_embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPrediction {
    pub case_id: String,
    pub model_name: String,
    pub risk_score: f64,
}

/// Reads `case_id,model_name,risk_score` with a header row.
pub fn load_expert_predictions(path: &Path) -> Result<Vec<ExpertPrediction>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<ExpertPrediction>() {
        let row = row.map_err(|e| Error::parse(path.display().to_string(), e))?;
        if !row.risk_score.is_finite() {
            return Err(Error::Invalid(format!(
                "non-finite risk score for {} / {}",
                row.case_id, row.model_name
            )));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn write_expert_predictions(path: &Path, preds: &[ExpertPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for p in preds {
        w.serialize(p).map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    #[default]
    Months,
    Days,
}

#[derive(Debug, Deserialize, Serialize)]
struct CaseRow {
    case_id: String,
    slide_manifest: PathBuf,
    gene_profile: PathBuf,
    survival_time: Option<f64>,
    event: Option<u8>,
}

/// Reads a cohort table `case_id,slide_manifest,gene_profile,survival_time,event`.
/// Relative paths resolve against the table's directory; empty time/event
/// columns mark unlabeled cases.
pub fn load_cases(path: &Path, unit: TimeUnit) -> Result<Vec<CaseRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for row in reader.deserialize::<CaseRow>() {
        let row = row.map_err(|e| Error::parse(path.display().to_string(), e))?;
        if !seen.insert(row.case_id.clone()) {
            return Err(Error::Invalid(format!("duplicate case id {}", row.case_id)));
        }
        let label = match (row.survival_time, row.event) {
            (Some(t), Some(e)) => {
                let event = e != 0;
                Some(match unit {
                    TimeUnit::Months => SurvivalLabel::new(t, event)?,
                    TimeUnit::Days => SurvivalLabel::from_days(t, event)?,
                })
            }
            (None, None) => None,
            _ => {
                return Err(Error::Invalid(format!(
                    "case {}: survival_time and event must both be set or both be empty",
                    row.case_id
                )))
            }
        };
        out.push(CaseRecord {
            case_id: row.case_id,
            slide_manifest: base.join(row.slide_manifest),
            gene_profile: base.join(row.gene_profile),
            label,
        });
    }
    Ok(out)
}

pub fn write_cases(path: &Path, cases: &[CaseRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for c in cases {
        w.serialize(CaseRow {
            case_id: c.case_id.clone(),
            slide_manifest: c.slide_manifest.clone(),
            gene_profile: c.gene_profile.clone(),
            survival_time: c.label.map(|l| l.time_months),
            event: c.label.map(|l| u8::from(l.event)),
        })
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    NegativeTime,
    NonFiniteTime,
    DuplicateSymbol(String),
    NonFiniteExpression(String),
    /// A referenced file could not be read or parsed.
    IOViolation { path: PathBuf, message: String },
    LevelMismatch { patch_id: String, level: u32, magnification: f64 },
    EmbeddingNotUnit { patch_id: String, norm: f64 },
    AttentionOutOfRange { patch_id: String, value: f64 },
    DuplicatePatchId(String),
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub fn is_unit(v: &[f32]) -> bool {
    (l2_norm(v) - 1.0).abs() <= UNIT_NORM_TOL
}

/// Checks every type invariant reachable from one case. Unreadable files
/// become `IOViolation` entries rather than errors.
pub fn validate_case(case: &CaseRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Some(label) = case.label {
        if !label.time_months.is_finite() {
            out.push(Violation::NonFiniteTime);
        } else if label.time_months < 0.0 {
            out.push(Violation::NegativeTime);
        }
    }

    match GeneProfile::load(&case.gene_profile) {
        Ok(profile) => {
            let mut seen = BTreeSet::new();
            for g in &profile.genes {
                if !seen.insert(g.symbol.as_str()) {
                    out.push(Violation::DuplicateSymbol(g.symbol.clone()));
                }
                if !g.expression.is_finite() {
                    out.push(Violation::NonFiniteExpression(g.symbol.clone()));
                }
            }
        }
        Err(e) => out.push(Violation::IOViolation {
            path: case.gene_profile.clone(),
            message: e.to_string(),
        }),
    }

    match SlideManifest::load(&case.slide_manifest).and_then(|m| m.patches()) {
        Ok(patches) => {
            let mut ids = BTreeSet::new();
            for p in &patches {
                if !ids.insert(p.patch_id.as_str()) {
                    out.push(Violation::DuplicatePatchId(p.patch_id.clone()));
                }
                if p.magnification.level() != p.level {
                    out.push(Violation::LevelMismatch {
                        patch_id: p.patch_id.clone(),
                        level: p.level,
                        magnification: p.magnification.value(),
                    });
                }
                if let Some(e) = &p.embedding {
                    if !is_unit(e) {
                        out.push(Violation::EmbeddingNotUnit {
                            patch_id: p.patch_id.clone(),
                            norm: l2_norm(e),
                        });
                    }
                }
                if let Some(a) = p.attention {
                    if !(0.0..=1.0).contains(&a) {
                        out.push(Violation::AttentionOutOfRange {
                            patch_id: p.patch_id.clone(),
                            value: a,
                        });
                    }
                }
                if !p.image_ref.exists() {
                    out.push(Violation::IOViolation {
                        path: p.image_ref.clone(),
                        message: "image file missing".into(),
                    });
                }
            }
        }
        Err(e) => out.push(Violation::IOViolation {
            path: case.slide_manifest.clone(),
            message: e.to_string(),
        }),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStratum {
    pub model_name: String,
    pub risk_score: f64,
    pub stratum: RiskStratum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSummary {
    pub case_id: String,
    pub score: f64,
    pub label: SurvivalLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub case_id: String,
    /// Dichotomy decisions, one per level; each is 1 (shorter) or 2 (longer).
    pub y: Vec<u8>,
    pub final_stratum: RiskStratum,
    pub final_interval: Interval,
    pub predicted_months: f64,
    pub risk_score: f64,
    pub wsi_report: Report,
    pub gene_report: Report,
    pub reasoning_report: Report,
    pub retrieved_case_ids: Vec<String>,
    pub retrieved: Vec<RetrievedSummary>,
    pub expert_strata: Vec<ExpertStratum>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}
