//! Synthetic cohorts with a known survival signal, for the oracle backend.
//!
//! Each case gets a hidden severity `s` derived from its true survival time.
//! Tile metadata, gene mutation rates and expert scores all carry `s` (plus
//! noise), so a pipeline that propagates evidence faithfully recovers the
//! ranking of survival times.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backend::oracle::{severity_from_months, MUTATION_BASE, MUTATION_SLOPE};
use crate::bundled;
use crate::datamodel::{write_cases, write_expert_predictions, CaseRecord, ExpertPrediction, GeneProfile, GeneRecord, SurvivalLabel};
use crate::error::{Error, Result};
use crate::manifest::{write_embedding_file, LevelEntry, SlideManifest, TileEntry};

const COLS: u64 = 12;
const ROWS: u64 = 10;
const HOT_COLS: u64 = 4;
const HOT_ROWS: u64 = 3;
const TILE: u64 = 512;
const VISUAL_DIM: usize = 32;
const IMAGE_PX: u32 = 16;

const PATTERNS: [&str; 8] = [
    "papillary",
    "solid",
    "nested",
    "trabecular",
    "infiltrative",
    "glandular",
    "cribriform",
    "diffuse",
];
const NUCLEI: [&str; 7] = [
    "pleomorphic",
    "vesicular",
    "hyperchromatic",
    "enlarged",
    "monotonous",
    "crowded",
    "irregular",
];
const STROMA: [&str; 6] = ["desmoplastic", "edematous", "fibrotic", "inflamed", "myxoid", "hyalinized"];
const VARIANTS: [&str; 3] = ["sarcomatoid", "micropapillary", "plasmacytoid"];
const UNMAPPED_GENES: [&str; 3] = ["MALAT1", "NEAT1", "XIST"];
/// Expert models and the noise of their log-hazard scores.
const EXPERTS: [(&str, f64); 3] = [("MOTCat", 0.3), ("MCAT", 0.4), ("CCL", 0.5)];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub cohort: String,
    pub n_cases: usize,
    pub n_holdout: usize,
    pub seed: u64,
    /// Fraction of slides shipped with a ×2.5 overview; the rest need one synthesized.
    pub overview_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            cohort: "synthetic".into(),
            n_cases: 20,
            n_holdout: 5,
            seed: 7,
            overview_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub case_id: String,
    pub true_months: f64,
    pub severity: f64,
    pub label: SurvivalLabel,
    pub holdout: bool,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub config: PathBuf,
    pub truth: Vec<SynthTruth>,
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    Normal::new(0.0, sd).expect("finite sd").sample(rng)
}

fn normalize(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let v: Vec<f64> = (0..VISUAL_DIM).map(|_| gauss(rng, 1.0)).collect();
    normalize(&v)
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty vocabulary")
}

fn tumor_meta(rng: &mut ChaCha8Rng, s: f64, ambiguous: bool) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let high = rng.random_bool((0.15 + 0.7 * s).clamp(0.0, 1.0));
    m.insert("grade".into(), if high { "high" } else { "low" }.into());
    m.insert("pattern".into(), pick(rng, &PATTERNS).into());
    m.insert("nuclei".into(), pick(rng, &NUCLEI).into());
    m.insert("stroma".into(), pick(rng, &STROMA).into());
    m.insert("perineural".into(), rng.random_bool(0.6 * s).to_string());
    m.insert("lvi".into(), rng.random_bool(0.5 * s).to_string());
    let necrosis = (40.0 * s + gauss(rng, 5.0)).clamp(0.0, 90.0).round();
    m.insert("necrosis".into(), format!("{necrosis}"));
    let lymph = if s > 0.6 { "sparse" } else if s > 0.3 { "moderate" } else { "dense" };
    m.insert("lymphocytes".into(), lymph.into());
    let variant = if rng.random_bool(0.15 * s) { pick(rng, &VARIANTS) } else { "none" };
    m.insert("variant".into(), variant.into());
    let sev = (s + gauss(rng, 0.02)).clamp(0.0, 1.0);
    m.insert("severity".into(), format!("{sev:.3}"));
    if ambiguous {
        m.insert("ambiguous".into(), "true".into());
    }
    m
}

fn write_tile_images(dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let colors = [[214u8, 150, 190], [190, 120, 170], [236, 200, 220], [150, 90, 150]];
    colors
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = dir.join(format!("tile{i}.png"));
            image::RgbImage::from_pixel(IMAGE_PX, IMAGE_PX, image::Rgb(*c))
                .save(&p)
                .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", p.display())))?;
            Ok(PathBuf::from("../../tiles").join(format!("tile{i}.png")))
        })
        .collect()
}

fn write_slide(dir: &Path, case_id: &str, s: f64, spec: &SynthSpec, images: &[PathBuf], rng: &mut ChaCha8Rng) -> Result<PathBuf> {
    let col0 = rng.random_range(0..=COLS - HOT_COLS);
    let row0 = rng.random_range(0..=ROWS - HOT_ROWS);
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut tiles10 = Vec::new();
    let mut tiles20 = Vec::new();
    let mut first_hot: Option<Vec<f32>> = None;
    for row in 0..ROWS {
        for col in 0..COLS {
            let hot = (col0..col0 + HOT_COLS).contains(&col) && (row0..row0 + HOT_ROWS).contains(&row);
            let patch_id = format!("{case_id}_r{row}c{col}");
            let (attention, meta) = if hot {
                let ambiguous = rng.random_bool(0.25);
                (rng.random_range(0.8..0.95), tumor_meta(rng, s, ambiguous))
            } else {
                let mut m = BTreeMap::new();
                m.insert("stroma".into(), pick(rng, &STROMA).into());
                (rng.random_range(0.05..0.45), m)
            };
            let mut emb = unit_vector(rng);
            if hot {
                // One near-duplicate pair per slide: the second hot tile
                // repeats the first with a small perturbation.
                match &first_hot {
                    None => first_hot = Some(emb.clone()),
                    Some(first) if hot_count(&tiles10) == 1 => {
                        let v: Vec<f64> = first.iter().map(|x| f64::from(*x) + gauss(rng, 0.01)).collect();
                        emb = normalize(&v);
                    }
                    Some(_) => {}
                }
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let sub_id = format!("{patch_id}_s{dy}{dx}");
                    let sub = TileEntry {
                        patch_id: sub_id.clone(),
                        x: 2 * col * TILE + dx * TILE,
                        y: 2 * row * TILE + dy * TILE,
                        w: TILE,
                        h: TILE,
                        image: images[((row + col + dx + dy) % images.len() as u64) as usize].clone(),
                        embedding_file: Some("emb.vec".into()),
                        attention: None,
                        meta: tumor_meta(rng, s, false),
                    };
                    ids.push(sub_id);
                    rows.push(unit_vector(rng));
                    tiles20.push(sub);
                }
            }
            ids.push(patch_id.clone());
            rows.push(emb);
            tiles10.push((
                hot,
                TileEntry {
                    patch_id,
                    x: col * TILE,
                    y: row * TILE,
                    w: TILE,
                    h: TILE,
                    image: images[((row * COLS + col) % images.len() as u64) as usize].clone(),
                    embedding_file: Some("emb.vec".into()),
                    attention: Some(attention),
                    meta,
                },
            ));
        }
    }
    let mut levels = Vec::new();
    if rng.random_bool(spec.overview_fraction) {
        levels.push(LevelEntry {
            level: 3,
            magnification: 2.5,
            tiles: vec![TileEntry {
                patch_id: format!("{case_id}_overview"),
                x: 0,
                y: 0,
                w: COLS * TILE / 4,
                h: ROWS * TILE / 4,
                image: images[0].clone(),
                embedding_file: None,
                attention: None,
                meta: tumor_meta(rng, s, false),
            }],
        });
    }
    levels.push(LevelEntry {
        level: 2,
        magnification: 10.0,
        tiles: tiles10.into_iter().map(|(_, t)| t).collect(),
    });
    levels.push(LevelEntry {
        level: 1,
        magnification: 20.0,
        tiles: tiles20,
    });
    write_embedding_file(&dir.join("emb.vec"), &ids, &rows)?;
    let manifest = SlideManifest {
        slide_id: format!("{case_id}-slide"),
        levels,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("slide.json");
    manifest.save(&path)?;
    Ok(path)
}

fn hot_count(tiles: &[(bool, TileEntry)]) -> usize {
    tiles.iter().filter(|(hot, _)| *hot).count()
}

fn gene_symbols() -> Result<Vec<String>> {
    let text = bundled::resource("category_map.json").expect("bundled category map");
    let map: indexmap::IndexMap<String, Vec<String>> =
        serde_json::from_str(text).map_err(|e| Error::parse("bundled category_map.json", e))?;
    let mut out: Vec<String> = map.into_values().flatten().collect();
    out.extend(UNMAPPED_GENES.iter().map(|g| g.to_string()));
    Ok(out)
}

fn write_genes(dir: &Path, symbols: &[String], s: f64, rng: &mut ChaCha8Rng) -> Result<PathBuf> {
    let p_mut = MUTATION_BASE + MUTATION_SLOPE * s;
    let profile = GeneProfile {
        genes: symbols
            .iter()
            .map(|sym| GeneRecord {
                symbol: sym.clone(),
                expression: (gauss(rng, 1.0) * 1000.0).round() / 1000.0,
                mutated: rng.random_bool(p_mut),
            })
            .collect(),
    };
    let path = dir.join("genes.tsv");
    std::fs::write(&path, profile.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn relative(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// Writes a cohort under `dir`: case files, `cases.csv`, `holdout.csv`,
/// `experts.csv`, `truth.csv`, bundled prompts/resources and `config.toml`.
pub fn generate(dir: &Path, spec: &SynthSpec) -> Result<SynthCohort> {
    if spec.n_cases == 0 {
        return Err(Error::Invalid("synthetic cohort needs at least one case".into()));
    }
    if !(0.0..=1.0).contains(&spec.overview_fraction) {
        return Err(Error::Invalid("overview fraction must lie in [0, 1]".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bundled::write_prompts(&dir.join("prompts"))?;
    bundled::write_resources(&dir.join("resources"))?;
    let images = write_tile_images(&dir.join("tiles"))?;
    let symbols = gene_symbols()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut truth = Vec::new();
    let mut train = Vec::new();
    let mut held = Vec::new();
    let mut experts = Vec::new();
    let total = spec.n_cases + spec.n_holdout;
    for i in 0..total {
        let holdout = i >= spec.n_cases;
        let case_id = if holdout {
            format!("SYN-H{:03}", i - spec.n_cases + 1)
        } else {
            format!("SYN-{:04}", i + 1)
        };
        let true_months = (3.0f64.ln() + rng.random_range(0.0..1.0) * (80.0f64 / 3.0).ln()).exp();
        let censor = rng.random_range(10.0..100.0);
        let label = SurvivalLabel::new(true_months.min(censor), true_months <= censor)?;
        let severity = (severity_from_months(true_months) + gauss(&mut rng, 0.03)).clamp(0.0, 1.0);

        let case_dir = dir.join("cases").join(&case_id);
        std::fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
        let slide = write_slide(&case_dir, &case_id, severity, spec, &images, &mut rng)?;
        let genes = write_genes(&case_dir, &symbols, severity, &mut rng)?;
        for (model, sd) in EXPERTS {
            experts.push(ExpertPrediction {
                case_id: case_id.clone(),
                model_name: model.into(),
                risk_score: -(true_months / 12.0).ln() + gauss(&mut rng, sd),
            });
        }
        let record = CaseRecord {
            case_id: case_id.clone(),
            slide_manifest: relative(&slide, dir),
            gene_profile: relative(&genes, dir),
            label: Some(label),
        };
        if holdout { &mut held } else { &mut train }.push(record);
        truth.push(SynthTruth {
            case_id,
            true_months,
            severity,
            label,
            holdout,
        });
    }
    write_cases(&dir.join("cases.csv"), &train)?;
    if !held.is_empty() {
        write_cases(&dir.join("holdout.csv"), &held)?;
    }
    write_expert_predictions(&dir.join("experts.csv"), &experts)?;
    write_truth(&dir.join("truth.csv"), &truth)?;

    let holdout_line = if held.is_empty() { "" } else { "holdout = \"holdout.csv\"\n" };
    let folds = spec.n_cases.clamp(2, 5);
    let config = format!(
        "seed = {}\noutput_dir = \"out\"\nfolds = {folds}\n\n[[cohort]]\nname = \"{}\"\ncases = \"cases.csv\"\n{holdout_line}experts = \"experts.csv\"\n\n[backend]\nkind = \"mock\"\nmock_mode = \"oracle\"\n",
        spec.seed, spec.cohort
    );
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config).map_err(|e| Error::io(&config_path, e))?;
    Ok(SynthCohort {
        config: config_path,
        truth,
    })
}

fn write_truth(path: &Path, truth: &[SynthTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    w.write_record(["case_id", "true_months", "severity", "holdout"])
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    for t in truth {
        w.write_record([
            t.case_id.clone(),
            format!("{:.4}", t.true_months),
            format!("{:.4}", t.severity),
            t.holdout.to_string(),
        ])
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{load_cases, validate_case, TimeUnit};

    #[test]
    fn cohort_is_valid_and_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_cases: 4,
            n_holdout: 1,
            ..SynthSpec::default()
        };
        let ca = generate(a.path(), &spec).unwrap();
        generate(b.path(), &spec).unwrap();
        for f in ["cases.csv", "experts.csv", "truth.csv", "cases/SYN-0001/slide.json", "cases/SYN-0001/genes.tsv"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let cases = load_cases(&a.path().join("cases.csv"), TimeUnit::Months).unwrap();
        assert_eq!(cases.len(), 4);
        for c in &cases {
            assert!(validate_case(c).is_empty(), "{:?}", validate_case(c));
        }
        assert_eq!(ca.truth.iter().filter(|t| t.holdout).count(), 1);
        crate::config::RunConfig::load(&ca.config).unwrap();
    }

    #[test]
    fn severity_tracks_survival() {
        let d = tempfile::tempdir().unwrap();
        let c = generate(
            d.path(),
            &SynthSpec {
                n_cases: 30,
                n_holdout: 0,
                ..SynthSpec::default()
            },
        )
        .unwrap();
        for t in &c.truth {
            assert!((3.0..=80.0).contains(&t.true_months));
            assert!(t.label.time_months <= t.true_months + 1e-9);
        }
        let short = c.truth.iter().filter(|t| t.true_months < 10.0).map(|t| t.severity);
        let long = c.truth.iter().filter(|t| t.true_months > 40.0).map(|t| t.severity);
        assert!(short.fold(1.0, f64::min) > long.fold(0.0, f64::max));
    }

    #[test]
    fn oracle_mining_keeps_distinct_tiles() {
        use crate::backend::{Gateway, MockBackend, TemplateStore};
        use crate::manifest::SlideManifest;
        use crate::wsi::{analyze_slide, checklist::Checklist, WsiParams};

        let d = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_cases: 3,
            n_holdout: 0,
            ..SynthSpec::default()
        };
        generate(d.path(), &spec).unwrap();
        let gw = Gateway::mock(MockBackend::oracle(64), TemplateStore::load_dir(&d.path().join("prompts")).unwrap());
        let checklist = Checklist::load(&d.path().join("resources/wsi_checklist.txt")).unwrap();
        for case in ["SYN-0001", "SYN-0002", "SYN-0003"] {
            let m = SlideManifest::load(&d.path().join(format!("cases/{case}/slide.json"))).unwrap();
            let a = analyze_slide(case, &m, &checklist, &WsiParams::default(), &gw, d.path()).unwrap();
            assert_eq!(a.regions.len(), 1, "{case}");
            // The near-duplicate pair goes, most of the rest stays.
            assert!(a.reports_10x.len() >= 6 && a.reports_10x.len() <= 11, "{case}: {}", a.reports_10x.len());
            assert!(a.summary.text.contains("Severity index"), "{}", a.summary.text);
        }
    }
}
