//! Cohort-level runs: fold-scoped bank construction, inference on the test
//! cases and cross-validated evaluation.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! <cohort>/analysis/<case>.json      per-case reports, reused across folds
//! <cohort>/entries/<case>.json       per-case bank entries (report + CoT)
//! <cohort>/fold<i>/bank/             the two banks of fold i, training cases only
//! <cohort>/fold<i>/results/          one JSON + reasoning text per test case
//! <cohort>/full/                     bank from all cases, results for the holdout table
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::{write_trace, BackendKind, Gateway, TemplateStore, TraceEntry};
use crate::bank::{bank_file, CaseBank, SCHEMA_VERSION};
use crate::config::{config_hash, CohortConfig, RunConfig};
use crate::cot::build_cot;
use crate::datamodel::{
    load_cases, load_expert_predictions, BankEntry, CaseRecord, ExpertPrediction, GeneProfile, InferenceResult, Modality,
    Quality, SurvivalLabel,
};
use crate::error::{Error, Result};
use crate::gene::{analyze_genes, CategoryMap, GeneAnalysis, GeneKnowledgeBase, GeneResources};
use crate::inference::{run_inference, ExpertPanel, InferenceParams};
use crate::manifest::SlideManifest;
use crate::retrieval::build_index;
use crate::sidecar::sha256_hex;
use crate::survstats::{self, KmCurve};
use crate::wsi::{analyze_slide, Checklist, WsiAnalysis};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which cases a run trains on and which it predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldSel {
    /// Bank from every case of the cohort table; predictions for the holdout table.
    Full,
    /// 1-based cross-validation fold.
    Fold(usize),
}

impl FoldSel {
    pub fn dir_name(self) -> String {
        match self {
            FoldSel::Full => "full".into(),
            FoldSel::Fold(i) => format!("fold{i}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<CaseRecord>,
    pub test: Vec<CaseRecord>,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<BackendKind>,
    pub jobs: Option<usize>,
    pub experts: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAnalysis {
    pub key: String,
    pub case_id: String,
    pub wsi: WsiAnalysis,
    pub gene: GeneAnalysis,
    /// Backend calls that produced this analysis, replayed into run traces.
    #[serde(default)]
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntries {
    pub key: String,
    pub wsi: BankEntry,
    pub gene: BankEntry,
    #[serde(default)]
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub backend: String,
    pub cohort: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    pub cases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankSummary {
    pub dir: PathBuf,
    pub wsi_entries: usize,
    pub gene_entries: usize,
    /// Entries whose CoT ended below high quality (accepted after the round cap).
    pub force_accepted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortEvaluation {
    pub cohort: String,
    /// `None` for folds without a comparable pair.
    pub fold_cindex: Vec<Option<f64>>,
    pub table_cell: String,
    pub logrank: Option<survstats::LogRank>,
    pub predictions: Vec<(usize, InferenceResult, SurvivalLabel)>,
}

pub struct Experiment {
    pub cfg: RunConfig,
    pub config_hash: String,
    gw: Gateway,
    checklist: Checklist,
    gene_res: GeneResources,
    pool: rayon::ThreadPool,
    experts_override: Option<PathBuf>,
    /// Hash of everything a per-case analysis depends on besides the case files.
    analysis_key: String,
    analyses: Mutex<HashMap<String, Arc<CaseAnalysis>>>,
    entries: Mutex<HashMap<String, Arc<CaseEntries>>>,
}

fn dir_digest(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut acc = Vec::new();
    for f in files {
        acc.extend(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().bytes());
        acc.extend(std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(sha256_hex(&acc))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Fails if any of `ids` belongs to the test set.
pub fn check_disjoint<'a>(ids: impl IntoIterator<Item = &'a str>, test: &HashSet<String>, what: &str) -> Result<()> {
    let mut leaked: Vec<&str> = ids.into_iter().filter(|c| test.contains(*c)).collect();
    if leaked.is_empty() {
        return Ok(());
    }
    leaked.sort_unstable();
    Err(Error::Leakage(format!("{what} contains test case(s) {}", leaked.join(", "))))
}

/// Fails if a result lists its own case among the retrieved neighbors.
pub fn check_self_exclusion(result: &InferenceResult) -> Result<()> {
    if result.retrieved_case_ids.contains(&result.case_id) {
        return Err(Error::Leakage(format!("case {} retrieved itself", result.case_id)));
    }
    Ok(())
}

impl Experiment {
    pub fn open(config_path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut cfg = RunConfig::load(config_path)?;
        if let Some(kind) = overrides.backend {
            cfg.backend.kind = kind;
        }
        if let Some(jobs) = overrides.jobs {
            if jobs == 0 {
                return Err(Error::Invalid("--jobs must be >= 1".into()));
            }
            cfg.jobs = jobs;
        }
        cfg.validate()?;
        if let Some(p) = &overrides.experts {
            if !p.exists() {
                return Err(Error::Invalid(format!("{} does not exist", p.display())));
            }
        }
        let templates = TemplateStore::load_dir(&cfg.prompts_dir)?;
        let gw = cfg.backend.build(templates)?;
        let checklist = Checklist::load(&cfg.checklist_path())?;
        let gene_res = GeneResources {
            cmap: CategoryMap::load(&cfg.category_map_path())?,
            kb: GeneKnowledgeBase::load(&cfg.gene_kb_path())?,
            max_k: cfg.gene.max_k,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        let key_src = serde_json::json!({
            "wsi": cfg.wsi,
            "gene": cfg.gene,
            "cot": cfg.cot,
            "backend": cfg.backend,
            "prompts": dir_digest(&cfg.prompts_dir)?,
            "resources": dir_digest(&cfg.resources_dir)?,
        });
        let analysis_key = sha256_hex(key_src.to_string().as_bytes());
        Ok(Self {
            config_hash: config_hash(config_path)?,
            cfg,
            gw,
            checklist,
            gene_res,
            pool,
            experts_override: overrides.experts.clone(),
            analysis_key,
            analyses: Mutex::new(HashMap::new()),
            entries: Mutex::new(HashMap::new()),
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gw
    }

    fn cohort_dir(&self, cohort: &CohortConfig) -> PathBuf {
        self.cfg.output_dir.join(&cohort.name)
    }

    pub fn load_cohort(&self, cohort: &CohortConfig) -> Result<Vec<CaseRecord>> {
        load_cases(&cohort.cases, self.cfg.time_unit)
    }

    pub fn split(&self, cohort: &CohortConfig, sel: FoldSel) -> Result<Split> {
        let cases = self.load_cohort(cohort)?;
        let dir = self.cohort_dir(cohort).join(sel.dir_name());
        match sel {
            FoldSel::Full => {
                let test = match &cohort.holdout {
                    Some(h) => load_cases(h, self.cfg.time_unit)?,
                    None => Vec::new(),
                };
                let train_ids: HashSet<String> = cases.iter().map(|c| c.case_id.clone()).collect();
                check_disjoint(test.iter().map(|c| c.case_id.as_str()), &train_ids, "holdout table")
                    .map_err(|e| Error::Leakage(format!("{e}; holdout cases must not appear in the cohort table")))?;
                Ok(Split { train: cases, test, dir })
            }
            FoldSel::Fold(i) => {
                if i == 0 || i > self.cfg.folds {
                    return Err(Error::Invalid(format!("fold {i} out of range 1..={}", self.cfg.folds)));
                }
                let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
                let folds = survstats::kfold(&ids, self.cfg.folds, self.cfg.seed)?;
                let test_ids: HashSet<&String> = folds[i - 1].iter().collect();
                let (test, train): (Vec<CaseRecord>, Vec<CaseRecord>) =
                    cases.into_iter().partition(|c| test_ids.contains(&c.case_id));
                Ok(Split { train, test, dir })
            }
        }
    }

    fn run_parallel<T: Send, F>(&self, cases: &[CaseRecord], f: F) -> Result<Vec<(T, Vec<TraceEntry>)>>
    where
        F: Fn(&CaseRecord, &Gateway) -> Result<T> + Sync,
    {
        self.pool.install(|| {
            cases
                .par_iter()
                .map(|c| {
                    let gw = self.gw.fork();
                    let out = f(c, &gw)?;
                    Ok((out, gw.trace()))
                })
                .collect()
        })
    }

    /// Reports for one case, from memory, disk or a fresh pipeline run.
    pub fn analysis(&self, cohort: &CohortConfig, case: &CaseRecord, gw: &Gateway) -> Result<Arc<CaseAnalysis>> {
        let mem_key = format!("{}/{}", cohort.name, case.case_id);
        if let Some(a) = self.analyses.lock().unwrap().get(&mem_key) {
            return Ok(Arc::clone(a));
        }
        let path = self.cohort_dir(cohort).join("analysis").join(format!("{}.json", case.case_id));
        let key = self.case_key(case)?;
        let analysis = match read_json::<CaseAnalysis>(&path).filter(|a| a.key == key) {
            Some(a) => a,
            None => {
                let gw = &gw.fork();
                let manifest = SlideManifest::load(&case.slide_manifest)?;
                let scratch = self.cohort_dir(cohort).join("scratch");
                let wsi = analyze_slide(&case.case_id, &manifest, &self.checklist, &self.cfg.wsi, gw, &scratch)?;
                let profile = GeneProfile::load(&case.gene_profile)?;
                let gene = analyze_genes(&case.case_id, &profile, &self.gene_res, gw)?;
                let a = CaseAnalysis {
                    key,
                    case_id: case.case_id.clone(),
                    wsi,
                    gene,
                    trace: gw.trace(),
                };
                write_json(&path, &a)?;
                a
            }
        };
        let a = Arc::new(analysis);
        self.analyses.lock().unwrap().insert(mem_key, Arc::clone(&a));
        Ok(a)
    }

    fn case_key(&self, case: &CaseRecord) -> Result<String> {
        let slide = std::fs::read(&case.slide_manifest).map_err(|e| Error::io(&case.slide_manifest, e))?;
        let genes = std::fs::read(&case.gene_profile).map_err(|e| Error::io(&case.gene_profile, e))?;
        let mut acc = self.analysis_key.clone().into_bytes();
        acc.extend(sha256_hex(&slide).bytes());
        acc.extend(sha256_hex(&genes).bytes());
        Ok(sha256_hex(&acc))
    }

    /// The WSI and gene bank entries of a labeled training case.
    pub fn case_entries(&self, cohort: &CohortConfig, case: &CaseRecord, gw: &Gateway) -> Result<Arc<CaseEntries>> {
        let label = case
            .label
            .ok_or_else(|| Error::Invalid(format!("training case {} has no survival label", case.case_id)))?;
        let mem_key = format!("{}/{}", cohort.name, case.case_id);
        if let Some(e) = self.entries.lock().unwrap().get(&mem_key) {
            return Ok(Arc::clone(e));
        }
        let analysis = self.analysis(cohort, case, gw)?;
        let key = sha256_hex(
            format!("{}|{}|{}", analysis.key, label.time_months, label.event).as_bytes(),
        );
        let path = self.cohort_dir(cohort).join("entries").join(format!("{}.json", case.case_id));
        let entries = match read_json::<CaseEntries>(&path).filter(|e| e.key == key) {
            Some(e) => e,
            None => {
                let gw = &gw.fork();
                let make = |modality: Modality| -> Result<BankEntry> {
                    let report = match modality {
                        Modality::Wsi => &analysis.wsi.summary,
                        Modality::Gene => &analysis.gene.summary,
                    };
                    let tag = format!("{}/cot/{}", case.case_id, modality);
                    let cot = build_cot(report, &label, modality, gw, self.cfg.cot.max_rounds, &tag)?;
                    Ok(BankEntry {
                        case_id: case.case_id.clone(),
                        modality,
                        summarized_report: report.clone(),
                        cot,
                        label,
                        report_embedding: gw.embed_text(&report.text)?,
                    })
                };
                let (wsi, gene) = (make(Modality::Wsi)?, make(Modality::Gene)?);
                let e = CaseEntries {
                    key,
                    wsi,
                    gene,
                    trace: gw.trace(),
                };
                write_json(&path, &e)?;
                e
            }
        };
        let e = Arc::new(entries);
        self.entries.lock().unwrap().insert(mem_key, Arc::clone(&e));
        Ok(e)
    }

    fn manifest(&self, command: &str, cohort: &CohortConfig, sel: FoldSel, cases: &[CaseRecord]) -> RunManifest {
        let mut versions = BTreeMap::new();
        versions.insert("survagent".to_string(), VERSION.to_string());
        versions.insert("bank_schema".to_string(), SCHEMA_VERSION.to_string());
        let backend = match self.cfg.backend.kind {
            BackendKind::Mock => format!("mock/{:?}", self.cfg.backend.mock_mode).to_lowercase(),
            BackendKind::Http => format!("http/{}", self.cfg.backend.model),
        };
        RunManifest {
            command: command.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            versions,
            backend,
            cohort: cohort.name.clone(),
            fold: match sel {
                FoldSel::Full => None,
                FoldSel::Fold(i) => Some(i),
            },
            cases: cases.iter().map(|c| c.case_id.clone()).collect(),
        }
    }

    /// Builds (or completes) the fold's two banks from its training cases.
    pub fn build_bank(&self, cohort: &CohortConfig, sel: FoldSel) -> Result<BankSummary> {
        let split = self.split(cohort, sel)?;
        let bank_dir = split.dir.join("bank");
        let test_ids: HashSet<String> = split.test.iter().map(|c| c.case_id.clone()).collect();
        let manifest = self.manifest("build-bank", cohort, sel, &split.train);
        let manifest_path = bank_dir.join("manifest.json");

        // A bank left by a different configuration or split starts over.
        let stale = read_json::<RunManifest>(&manifest_path)
            .is_some_and(|m| m.config_hash != manifest.config_hash || m.cases != manifest.cases);
        if stale {
            for m in [Modality::Wsi, Modality::Gene] {
                let f = bank_file(&bank_dir, m);
                remove_if_exists(&f)?;
                remove_if_exists(&crate::bank::sidecar_path(&f))?;
            }
        }
        let mut wsi = CaseBank::open_or_create(&bank_file(&bank_dir, Modality::Wsi), Modality::Wsi)?;
        let mut gene = CaseBank::open_or_create(&bank_file(&bank_dir, Modality::Gene), Modality::Gene)?;
        check_disjoint(wsi.case_ids(), &test_ids, "existing WSI bank")?;
        check_disjoint(gene.case_ids(), &test_ids, "existing gene bank")?;

        let results = self.run_parallel(&split.train, |c, gw| {
            let e = self.case_entries(cohort, c, gw)?;
            Ok((self.analysis(cohort, c, gw)?, e))
        })?;
        let mut trace = Vec::new();
        for ((a, e), t) in results {
            trace.extend(a.trace.iter().chain(&e.trace).cloned());
            trace.extend(t);
            // Training set and test set are disjoint by construction; assert anyway.
            check_disjoint([e.wsi.case_id.as_str()], &test_ids, "bank build")?;
            if wsi.get(&e.wsi.case_id).is_none() {
                wsi.append(e.wsi.clone())?;
            }
            if gene.get(&e.gene.case_id).is_none() {
                gene.append(e.gene.clone())?;
            }
        }
        write_json(&manifest_path, &manifest)?;
        let trace_path = bank_dir.join("trace.jsonl");
        remove_if_exists(&trace_path)?;
        write_trace(&trace_path, &trace)?;
        let force_accepted = wsi
            .entries()
            .iter()
            .chain(gene.entries())
            .filter(|e| e.cot.quality != Quality::High)
            .count();
        Ok(BankSummary {
            dir: bank_dir,
            wsi_entries: wsi.len(),
            gene_entries: gene.len(),
            force_accepted,
        })
    }

    fn expert_predictions(&self, cohort: &CohortConfig) -> Result<Vec<ExpertPrediction>> {
        load_expert_predictions(self.experts_override.as_deref().unwrap_or(&cohort.experts))
    }

    /// Predicts every test case of the fold against the fold's bank.
    pub fn infer(&self, cohort: &CohortConfig, sel: FoldSel) -> Result<Vec<InferenceResult>> {
        let split = self.split(cohort, sel)?;
        if split.test.is_empty() {
            return Err(Error::Invalid(format!(
                "cohort {} has no test cases for {}",
                cohort.name,
                sel.dir_name()
            )));
        }
        let bank_dir = split.dir.join("bank");
        let wsi = CaseBank::load(&bank_file(&bank_dir, Modality::Wsi))?;
        let gene = CaseBank::load(&bank_file(&bank_dir, Modality::Gene))?;
        let test_ids: HashSet<String> = split.test.iter().map(|c| c.case_id.clone()).collect();
        check_disjoint(wsi.case_ids(), &test_ids, "WSI bank")?;
        check_disjoint(gene.case_ids(), &test_ids, "gene bank")?;
        let index = build_index(&wsi, &gene, self.cfg.retrieval.weights())?;

        let preds = self.expert_predictions(cohort)?;
        let population: HashSet<String> = split.train.iter().map(|c| c.case_id.clone()).collect();
        let panel = ExpertPanel::from_population(&preds, &population)?;
        let params = InferenceParams {
            k: self.cfg.retrieval.k,
        };

        let results = self.run_parallel(&split.test, |c, gw| {
            let a = self.analysis(cohort, c, gw)?;
            let r = run_inference(&c.case_id, &a.wsi.summary, &a.gene.summary, &index, &panel, &preds, &params, gw)?;
            Ok((r, a))
        })?;

        let out_dir = split.dir.join("results");
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let mut trace = Vec::new();
        let mut out = Vec::new();
        let mut csv = String::from("case_id,final_stratum,predicted_months,risk_score,time,event\n");
        for (((r, a), t), case) in results.into_iter().zip(&split.test) {
            trace.extend(a.trace.iter().cloned());
            check_self_exclusion(&r)?;
            check_disjoint(r.retrieved_case_ids.iter().map(String::as_str), &test_ids, "retrieved set")?;
            trace.extend(t);
            write_json(&out_dir.join(format!("{}.json", r.case_id)), &r)?;
            write_text(&out_dir.join(format!("{}_reasoning.txt", r.case_id)), &r.reasoning_report.text)?;
            let (time, event) = case
                .label
                .map_or((String::new(), String::new()), |l| (format!("{}", l.time_months), u8::from(l.event).to_string()));
            csv.push_str(&format!(
                "{},{},{:.2},{:.6},{time},{event}\n",
                r.case_id,
                r.final_stratum.name(),
                r.predicted_months,
                r.risk_score
            ));
            out.push(r);
        }
        write_text(&out_dir.join("predictions.csv"), &csv)?;
        write_json(&out_dir.join("manifest.json"), &self.manifest("infer", cohort, sel, &split.test))?;
        let trace_path = out_dir.join("trace.jsonl");
        remove_if_exists(&trace_path)?;
        write_trace(&trace_path, &trace)?;
        Ok(out)
    }

    /// Cross-validates one cohort: per fold, bank then inference.
    pub fn evaluate_cohort(&self, cohort: &CohortConfig) -> Result<CohortEvaluation> {
        let mut fold_cindex = Vec::new();
        let mut predictions = Vec::new();
        for i in 1..=self.cfg.folds {
            let sel = FoldSel::Fold(i);
            self.build_bank(cohort, sel)?;
            let split = self.split(cohort, sel)?;
            let results = self.infer(cohort, sel)?;
            let mut risks = Vec::new();
            let mut labels = Vec::new();
            for (r, c) in results.into_iter().zip(&split.test) {
                let label = c
                    .label
                    .ok_or_else(|| Error::Invalid(format!("case {} has no label to evaluate against", c.case_id)))?;
                risks.push(r.risk_score);
                labels.push(label);
                predictions.push((i, r, label));
            }
            match survstats::c_index(&risks, &labels) {
                Ok(c) => fold_cindex.push(Some(c)),
                Err(Error::NoComparablePairs) => {
                    log::warn!("{} fold {i}: no comparable pairs; C-index undefined", cohort.name);
                    fold_cindex.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        let defined: Vec<f64> = fold_cindex.iter().flatten().copied().collect();
        let table_cell = if defined.is_empty() {
            "NA".to_string()
        } else {
            survstats::format_mean_std(&defined)
        };
        let risks: Vec<f64> = predictions.iter().map(|(_, r, _)| r.risk_score).collect();
        let logrank = match survstats::median_split(&risks) {
            Ok((high, low)) => {
                let g = |idx: &[usize]| idx.iter().map(|&i| predictions[i].2).collect::<Vec<_>>();
                match survstats::logrank(&g(&high), &g(&low)) {
                    Ok(lr) => Some(lr),
                    Err(Error::NoEvents) => None,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::DegenerateSplit) => None,
            Err(e) => return Err(e),
        };
        Ok(CohortEvaluation {
            cohort: cohort.name.clone(),
            fold_cindex,
            table_cell,
            logrank,
            predictions,
        })
    }

    /// Evaluates every cohort and writes the tables. Returns the table text.
    pub fn evaluate(&self) -> Result<String> {
        let out = &self.cfg.output_dir;
        let mut cindex_csv = String::from("cohort,fold,c_index\n");
        let mut table = String::from("| Cohort | C-index |\n|---|---|\n");
        let mut logrank_csv = String::from("cohort,chi2,p_value\n");
        for cohort in &self.cfg.cohorts {
            let ev = self.evaluate_cohort(cohort)?;
            for (i, c) in ev.fold_cindex.iter().enumerate() {
                let cell = c.map_or("NA".to_string(), |c| format!("{c:.4}"));
                cindex_csv.push_str(&format!("{},{},{cell}\n", ev.cohort, i + 1));
            }
            table.push_str(&format!("| {} | {} |\n", ev.cohort, ev.table_cell));
            match &ev.logrank {
                Some(lr) => logrank_csv.push_str(&format!(
                    "{},{:.3},{}\n",
                    ev.cohort,
                    lr.chi2,
                    survstats::format_p(lr.p_value)
                )),
                None => logrank_csv.push_str(&format!("{},NA,NA\n", ev.cohort)),
            }
            let cdir = self.cohort_dir(cohort);
            write_text(&cdir.join("km.csv"), &km_csv(&ev)?)?;
            let mut pred_csv = String::from("case_id,fold,risk_score,predicted_months,final_stratum,time,event\n");
            for (fold, r, l) in &ev.predictions {
                pred_csv.push_str(&format!(
                    "{},{fold},{:.6},{:.2},{},{},{}\n",
                    r.case_id,
                    r.risk_score,
                    r.predicted_months,
                    r.final_stratum.name(),
                    l.time_months,
                    u8::from(l.event)
                ));
            }
            write_text(&cdir.join("predictions.csv"), &pred_csv)?;
        }
        write_text(&out.join("cindex.csv"), &cindex_csv)?;
        write_text(&out.join("cindex_table.md"), &table)?;
        write_text(&out.join("logrank.csv"), &logrank_csv)?;
        let cohorts: Vec<String> = self.cfg.cohorts.iter().map(|c| c.name.clone()).collect();
        let mut versions = BTreeMap::new();
        versions.insert("survagent".to_string(), VERSION.to_string());
        versions.insert("bank_schema".to_string(), SCHEMA_VERSION.to_string());
        let manifest = serde_json::json!({
            "command": "evaluate",
            "config_hash": self.config_hash,
            "seed": self.cfg.seed,
            "folds": self.cfg.folds,
            "versions": versions,
            "cohorts": cohorts,
        });
        write_json(&out.join("manifest.json"), &manifest)?;
        Ok(table)
    }
}

/// KM rows of the median-split groups of pooled out-of-fold risks.
fn km_csv(ev: &CohortEvaluation) -> Result<String> {
    let risks: Vec<f64> = ev.predictions.iter().map(|(_, r, _)| r.risk_score).collect();
    let mut out = String::from("time,survival,at_risk,group\n");
    let (high, low) = match survstats::median_split(&risks) {
        Ok(g) => g,
        Err(Error::DegenerateSplit) => return Ok(out),
        Err(e) => return Err(e),
    };
    for (name, idx) in [("high", high), ("low", low)] {
        let labels: Vec<SurvivalLabel> = idx.iter().map(|&i| ev.predictions[i].2).collect();
        out.push_str(&km_rows(&survstats::km_curve(&labels), name));
    }
    Ok(out)
}

pub fn km_rows(curve: &KmCurve, group: &str) -> String {
    let mut s = String::new();
    for i in 0..curve.times.len() {
        s.push_str(&format!(
            "{},{:.6},{},{group}\n",
            curve.times[i], curve.survival[i], curve.at_risk[i]
        ));
    }
    s
}
