use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checklist::{parse_attribute_block, Checklist};
use super::regions::{attention_cut, propose_regions, Region, RegionParams};
use super::similarity::{attention_order, cos_mine_select, pairwise_cosine, SelectionPolicy};
use crate::backend::{ask_parsed, Gateway, PromptRequest};
use crate::datamodel::{Confidence, Magnification, PatchRecord, Report, ReportSource, StructuredWsiReport};
use crate::error::{Error, Result};
use crate::manifest::{match_subtiles, subtile_windows, SlideManifest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WsiParams {
    pub tau_v: f64,
    pub tau_t: f64,
    pub policy: SelectionPolicy,
    pub eps: f64,
    pub min_pts: usize,
    pub attention_percentile: f64,
    pub subtile_size: u64,
    pub min_strip: u64,
}

impl Default for WsiParams {
    fn default() -> Self {
        Self {
            tau_v: 0.93,
            tau_t: 0.93,
            policy: SelectionPolicy::Literal,
            eps: 4.0,
            min_pts: 10,
            attention_percentile: 0.9,
            subtile_size: 512,
            min_strip: 256,
        }
    }
}

impl WsiParams {
    pub fn validate(&self) -> Result<()> {
        for tau in [self.tau_v, self.tau_t] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::BadThreshold(tau));
            }
        }
        if !(self.attention_percentile > 0.0 && self.attention_percentile <= 1.0) {
            return Err(Error::Invalid("attention percentile must lie in (0, 1]".into()));
        }
        if self.eps <= 0.0 || self.min_pts == 0 {
            return Err(Error::Invalid("region proposal needs eps > 0 and min_pts >= 1".into()));
        }
        Ok(())
    }

    pub fn region_params(&self) -> RegionParams {
        RegionParams {
            eps: self.eps,
            min_pts: self.min_pts,
            attention_percentile: self.attention_percentile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsiAnalysis {
    pub case_id: String,
    pub slide_id: String,
    pub global_report: Report,
    /// Set when the ×2.5 view was synthesized from the ×10 mosaic.
    pub synthetic_overview: bool,
    pub regions: Vec<Region>,
    pub candidate_ids: Vec<String>,
    pub reports_10x: Vec<Report>,
    pub reports_20x: Vec<Report>,
    pub structured: StructuredWsiReport,
    pub summary: Report,
    pub warnings: Vec<String>,
}

/// Global report from the ×2.5 overview image.
pub fn lm_screen(manifest: &SlideManifest, gw: &Gateway, tag: &str) -> Result<Report> {
    let level = Magnification::X2_5.level();
    let tiles = manifest.level_patches(level)?;
    let overview = tiles.first().ok_or_else(|| Error::MissingLevelImage {
        slide_id: manifest.slide_id.clone(),
        level,
    })?;
    screen_image(&manifest.slide_id, &overview.image_ref, &overview.metadata_line(), gw, tag)
}

fn screen_image(slide_id: &str, image: &Path, metadata: &str, gw: &Gateway, tag: &str) -> Result<Report> {
    let req = PromptRequest::new("wsi.global_screen.v1")
        .var("slide_id", slide_id)
        .var("metadata", metadata)
        .free_text()
        .tag(format!("{tag}/lmscreen"));
    let text = gw.describe_image(image, &req)?;
    Report::new(text, ReportSource::Global, slide_id)
}

/// Builds a ×2.5 overview by pasting the ×10 tiles into a mosaic and
/// downsampling by 4. Returns the written path.
pub fn synthesize_overview(manifest: &SlideManifest, out: &Path) -> Result<PathBuf> {
    let tiles = manifest.level_patches(Magnification::X10.level())?;
    if tiles.is_empty() {
        return Err(Error::MissingLevelImage {
            slide_id: manifest.slide_id.clone(),
            level: Magnification::X10.level(),
        });
    }
    // Tile images may be stored smaller than their nominal size; scale every
    // tile to a common pixel pitch derived from the first image.
    let first = image::open(&tiles[0].image_ref).map_err(|e| Error::UnreadableImage {
        path: tiles[0].image_ref.clone(),
        reason: e.to_string(),
    })?;
    let pitch = f64::from(first.width()) / tiles[0].width.max(1) as f64;
    let max_x = tiles.iter().map(|t| t.x + t.width).max().unwrap_or(0);
    let max_y = tiles.iter().map(|t| t.y + t.height).max().unwrap_or(0);
    let w = ((max_x as f64 * pitch).ceil() as u32).max(1);
    let h = ((max_y as f64 * pitch).ceil() as u32).max(1);
    let mut canvas = image::RgbImage::new(w, h);
    for t in &tiles {
        let img = image::open(&t.image_ref)
            .map_err(|e| Error::UnreadableImage {
                path: t.image_ref.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let tw = ((t.width as f64 * pitch).round() as u32).max(1);
        let th = ((t.height as f64 * pitch).round() as u32).max(1);
        let img = image::imageops::resize(&img, tw, th, image::imageops::FilterType::Triangle);
        image::imageops::replace(&mut canvas, &img, (t.x as f64 * pitch) as i64, (t.y as f64 * pitch) as i64);
    }
    let small = image::imageops::resize(&canvas, (w / 4).max(1), (h / 4).max(1), image::imageops::FilterType::Triangle);
    small.save(out).map_err(|e| Error::Invalid(format!("cannot write {}: {e}", out.display())))?;
    Ok(out.to_path_buf())
}

/// One preliminary description per patch.
pub fn describe_patches(patches: &[PatchRecord], slide_id: &str, gw: &Gateway, tag: &str) -> Result<Vec<Report>> {
    patches
        .iter()
        .map(|p| {
            let source = match p.magnification {
                Magnification::X20 => ReportSource::Mag20,
                Magnification::X10 => ReportSource::Mag10,
                Magnification::X2_5 => ReportSource::Global,
            };
            let req = PromptRequest::new("wsi.describe_patch.v1")
                .var("slide_id", slide_id)
                .var("patch_id", p.patch_id.clone())
                .var("magnification", p.magnification.to_string())
                .var("metadata", p.metadata_line())
                .free_text()
                .tag(format!("{tag}/describe/{}", p.patch_id));
            let text = gw.describe_image(&p.image_ref, &req)?;
            Report::new(text, source, p.patch_id.clone())
        })
        .collect()
}

/// Similarity-aware mining: indices (ascending) kept by both the visual and
/// the report-text criterion.
pub fn cos_mine(patches: &[PatchRecord], reports: &[Report], gw: &Gateway, params: &WsiParams) -> Result<Vec<usize>> {
    if patches.len() != reports.len() {
        return Err(Error::DimensionMismatch {
            expected: patches.len(),
            got: reports.len(),
        });
    }
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    let visual: Vec<Vec<f32>> = patches
        .iter()
        .map(|p| {
            p.embedding
                .clone()
                .ok_or_else(|| Error::Invalid(format!("patch {} has no visual embedding", p.patch_id)))
        })
        .collect::<Result<_>>()?;
    let textual: Vec<Vec<f32>> = reports.iter().map(|r| gw.embed_text(&r.text)).collect::<Result<_>>()?;
    let sv = pairwise_cosine(&visual)?;
    let st = pairwise_cosine(&textual)?;
    let attention: Vec<f64> = patches.iter().map(|p| p.attention.unwrap_or(0.0)).collect();
    let order = attention_order(&attention);
    cos_mine_select(&sv, &st, params.tau_v, params.tau_t, params.policy, Some(&order))
}

/// First of `low`/`medium`/`high` appearing as a word, case-insensitive.
pub fn parse_confidence(text: &str) -> Option<Confidence> {
    let lower = text.to_ascii_lowercase();
    let body = lower
        .find("confidence")
        .map(|i| &lower[i + "confidence".len()..])
        .filter(|rest| rest.split(|c: char| !c.is_ascii_alphabetic()).any(is_level_word))
        .unwrap_or(&lower);
    body.split(|c: char| !c.is_ascii_alphabetic())
        .find_map(|w| match w {
            "low" => Some(Confidence::Low),
            "medium" | "moderate" => Some(Confidence::Medium),
            "high" => Some(Confidence::High),
            _ => None,
        })
}

fn is_level_word(w: &str) -> bool {
    matches!(w, "low" | "medium" | "moderate" | "high")
}

/// Rates a ×10 report. Two unparseable answers fall back to Medium and flag
/// the report.
pub fn assess_confidence(report: &mut Report, gw: &Gateway, tag: &str) -> Result<Confidence> {
    if report.source != ReportSource::Mag10 {
        return Err(Error::Invalid("confidence assessment applies to x10 reports".into()));
    }
    let req = PromptRequest::new("wsi.confidence.v1")
        .var("patch_id", report.subject_id.clone())
        .var("report", report.text.clone())
        .max_tokens(32)
        .tag(format!("{tag}/confidence/{}", report.subject_id));
    let c = match ask_parsed(gw, &req, "Answer with one word: low, medium or high.", parse_confidence)? {
        Ok(c) => c,
        Err(_) => {
            log::warn!("unparseable confidence for {}; using medium", report.subject_id);
            report.flag("confidence_fallback");
            Confidence::Medium
        }
    };
    report.set_confidence(c)?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfMined {
    pub patches: Vec<PatchRecord>,
    pub reports: Vec<Report>,
    pub warnings: Vec<String>,
}

/// Zooms into each low-confidence ×10 patch: its ×20 sub-tiles are described
/// and mined; retained sub-tiles from all parents are concatenated in parent
/// order. Parents without sub-tiles are skipped with a warning.
pub fn conf_mine(
    low_conf: &[&PatchRecord],
    level1: &[PatchRecord],
    slide_id: &str,
    gw: &Gateway,
    params: &WsiParams,
    tag: &str,
) -> Result<ConfMined> {
    let mut out = ConfMined::default();
    for parent in low_conf {
        let windows = subtile_windows(parent, params.subtile_size, params.min_strip);
        let subs: Vec<PatchRecord> = match_subtiles(&windows, level1).into_iter().cloned().collect();
        if subs.is_empty() {
            let e = Error::MissingSubTiles(parent.patch_id.clone());
            log::warn!("{e}");
            out.warnings.push(e.to_string());
            continue;
        }
        let reports = describe_patches(&subs, slide_id, gw, tag)?;
        let keep = cos_mine(&subs, &reports, gw, params)?;
        for i in keep {
            out.patches.push(subs[i].clone());
            out.reports.push(reports[i].clone());
        }
    }
    Ok(out)
}

fn join_reports(reports: &[Report]) -> String {
    if reports.is_empty() {
        return "(none)".into();
    }
    reports
        .iter()
        .map(|r| format!("[{}] {}", r.subject_id, r.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Structured checklist report from all magnifications.
pub fn extract_attributes(
    global: &Report,
    reports_10x: &[Report],
    reports_20x: &[Report],
    checklist: &Checklist,
    gw: &Gateway,
    tag: &str,
) -> Result<(StructuredWsiReport, Vec<String>)> {
    let req = PromptRequest::new("wsi.extract_attributes.v1")
        .var("checklist", checklist.prompt_list())
        .var("global_report", global.text.clone())
        .var("reports_10x", join_reports(reports_10x))
        .var("reports_20x", join_reports(reports_20x))
        .max_tokens(2048)
        .tag(format!("{tag}/extract"));
    let hint = "One line per checklist attribute, formatted `Attribute: value`, then `Summary: ...`.";
    match ask_parsed(gw, &req, hint, |t| parse_attribute_block(t, checklist))? {
        Ok(p) => Ok((p.report, p.warnings)),
        Err(_) => Err(Error::ParseFailure {
            stage: "attribute extraction".into(),
        }),
    }
}

/// Condensed slide-level report. An all-"not assessed" input still yields a
/// summary, flagged `low_information`.
pub fn summarize_wsi(structured: &StructuredWsiReport, case_id: &str, gw: &Gateway, tag: &str) -> Result<Report> {
    let req = PromptRequest::new("wsi.summarize.v1")
        .var("case", case_id)
        .var("structured", structured.render())
        .free_text()
        .tag(format!("{tag}/summarize"));
    let text = gw.chat_complete(&req)?;
    let mut r = Report::new(text, ReportSource::WsiSummary, case_id)?;
    if structured.is_empty() {
        r.flag("low_information");
    }
    Ok(r)
}

/// Runs the full slide pipeline for one case. `scratch` receives the
/// synthesized overview image when the manifest lacks one.
pub fn analyze_slide(
    case_id: &str,
    manifest: &SlideManifest,
    checklist: &Checklist,
    params: &WsiParams,
    gw: &Gateway,
    scratch: &Path,
) -> Result<WsiAnalysis> {
    params.validate()?;
    let tag = format!("{case_id}/wsi");
    let mut warnings = Vec::new();

    let (global_report, synthetic_overview) = match lm_screen(manifest, gw, &tag) {
        Ok(r) => (r, false),
        Err(Error::MissingLevelImage { .. }) => {
            std::fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
            let path = synthesize_overview(manifest, &scratch.join(format!("{}_overview.png", manifest.slide_id)))?;
            warnings.push("x2.5 overview synthesized from the x10 mosaic".to_string());
            let mut r = screen_image(&manifest.slide_id, &path, "synthetic=true", gw, &tag)?;
            r.flag("synthetic_overview");
            (r, true)
        }
        Err(e) => return Err(e),
    };

    let tiles10 = manifest.level_patches(Magnification::X10.level())?;
    let regions = propose_regions(&tiles10, &params.region_params());
    let candidates: Vec<PatchRecord> = if regions.is_empty() {
        // No dense cluster: fall back to the high-attention tiles themselves.
        warnings.push("no attention-dense region; using high-attention tiles".to_string());
        let cut = attention_cut(&tiles10, params.attention_percentile).unwrap_or(0.0);
        tiles10
            .iter()
            .filter(|p| p.attention.unwrap_or(0.0) >= cut)
            .cloned()
            .collect()
    } else {
        let members: std::collections::HashSet<&str> = regions
            .iter()
            .flat_map(|r| r.member_ids.iter().map(String::as_str))
            .collect();
        tiles10.iter().filter(|p| members.contains(p.patch_id.as_str())).cloned().collect()
    };

    let prelim = describe_patches(&candidates, &manifest.slide_id, gw, &tag)?;
    let keep = cos_mine(&candidates, &prelim, gw, params)?;
    let mut reports_10x: Vec<Report> = keep.iter().map(|&i| prelim[i].clone()).collect();
    let kept: Vec<&PatchRecord> = keep.iter().map(|&i| &candidates[i]).collect();

    let mut low = Vec::new();
    for (r, p) in reports_10x.iter_mut().zip(&kept) {
        if assess_confidence(r, gw, &tag)? == Confidence::Low {
            low.push(*p);
        }
    }
    let tiles20 = manifest.level_patches(Magnification::X20.level())?;
    let mined = conf_mine(&low, &tiles20, &manifest.slide_id, gw, params, &tag)?;
    warnings.extend(mined.warnings);

    let (structured, w) = extract_attributes(&global_report, &reports_10x, &mined.reports, checklist, gw, &tag)?;
    warnings.extend(w);
    let summary = summarize_wsi(&structured, case_id, gw, &tag)?;

    Ok(WsiAnalysis {
        case_id: case_id.to_string(),
        slide_id: manifest.slide_id.clone(),
        global_report,
        synthetic_overview,
        regions,
        candidate_ids: candidates.iter().map(|p| p.patch_id.clone()).collect(),
        reports_10x,
        reports_20x: mined.reports,
        structured,
        summary,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixtureSet, MockBackend, TemplateStore};

    fn templates() -> TemplateStore {
        TemplateStore::load_dir(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../prompts")).unwrap()
    }

    fn fixture_gw(set: FixtureSet) -> Gateway {
        Gateway::mock(MockBackend::fixtures(set, 16), templates())
    }

    fn mag10_report(text: &str) -> Report {
        Report::new(text, ReportSource::Mag10, "p1").unwrap()
    }

    #[test]
    fn confidence_parsing() {
        assert_eq!(parse_confidence("Confidence: low"), Some(Confidence::Low));
        assert_eq!(parse_confidence("HIGH."), Some(Confidence::High));
        assert_eq!(parse_confidence("The highlighted area... confidence: medium"), Some(Confidence::Medium));
        assert_eq!(parse_confidence("no idea"), None);
    }

    #[test]
    fn confidence_from_backend() {
        let gw = fixture_gw(FixtureSet::new().with_default("wsi.confidence.v1", "Confidence: low"));
        let mut r = mag10_report("blurry nuclei");
        assert_eq!(assess_confidence(&mut r, &gw, "t").unwrap(), Confidence::Low);
        assert_eq!(r.confidence, Some(Confidence::Low));
    }

    #[test]
    fn confidence_garbage_twice_falls_back_to_medium() {
        let gw = fixture_gw(
            FixtureSet::new()
                .with_default("wsi.confidence.v1", "purple")
                .with_default("common.reformat.v1", "still purple"),
        );
        let mut r = mag10_report("blurry nuclei");
        assert_eq!(assess_confidence(&mut r, &gw, "t").unwrap(), Confidence::Medium);
        assert!(r.has_flag("confidence_fallback"));
        assert_eq!(gw.trace().len(), 2);
    }

    #[test]
    fn summary_of_empty_struct_is_flagged() {
        let gw = fixture_gw(FixtureSet::new().with_default("wsi.summarize.v1", "Nothing notable."));
        let parsed = parse_attribute_block("Tumor Grade: not assessed", &Checklist::default()).unwrap();
        let r = summarize_wsi(&parsed.report, "c1", &gw, "t").unwrap();
        assert!(r.has_flag("low_information"));
        assert_eq!(r.source, ReportSource::WsiSummary);
    }

    #[test]
    fn extraction_fails_after_reprompt() {
        let gw = fixture_gw(
            FixtureSet::new()
                .with_default("wsi.extract_attributes.v1", "I see tissue.")
                .with_default("common.reformat.v1", "Still just tissue."),
        );
        let g = Report::new("overview", ReportSource::Global, "s").unwrap();
        let err = extract_attributes(&g, &[], &[], &Checklist::default(), &gw, "t").unwrap_err();
        assert!(matches!(err, Error::ParseFailure { .. }));
    }

    #[test]
    fn zero_low_confidence_patches_is_vacuous() {
        let gw = fixture_gw(FixtureSet::new());
        let out = conf_mine(&[], &[], "s", &gw, &WsiParams::default(), "t").unwrap();
        assert!(out.patches.is_empty() && out.reports.is_empty());
        assert!(gw.trace().is_empty());
    }
}
