//! Acceptance run: one PASS/FAIL line per criterion, with timing against its
//! budget. Oracles are written out here from first principles and do not
//! call into the code they check.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use survagent::bank::{bank_file, CaseBank};
use survagent::datamodel::{InferenceResult, Magnification, Modality, PatchRecord, RiskStratum, SurvivalLabel};
use survagent::experiment::check_self_exclusion;
use survagent::inference::{compute_quartiles, map_risk_to_stratum};
use survagent::survstats::{c_index, chi2_sf_1df, km_curve, logrank};
use survagent::wsi::similarity::cos_mine_select;
use survagent::wsi::{pairwise_cosine, propose_regions, threshold_select, RegionParams, SelectionPolicy};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn label(t: f64, e: bool) -> SurvivalLabel {
    SurvivalLabel::new(t, e).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- oracles

fn brute_cindex(risks: &[f64], labels: &[SurvivalLabel]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if labels[i].event && labels[i].time_months < labels[j].time_months {
                den += 1.0;
                num += if risks[i] > risks[j] {
                    1.0
                } else if risks[i] == risks[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let t = x + 7.5;
    let s: f64 = C[0] + (1..9).map(|i| C[i] / (x + i as f64)).sum::<f64>();
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

/// Regularized upper incomplete gamma Q(a, x): series below a + 1,
/// continued fraction above.
fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let lead = (-x + a * x.ln() - ln_gamma(a)).exp();
    if x < a + 1.0 {
        let (mut term, mut sum, mut n) = (1.0 / a, 1.0 / a, a);
        while term.abs() > sum.abs() * 1e-17 {
            n += 1.0;
            term *= x / n;
            sum += term;
        }
        1.0 - sum * lead
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        lead * h
    }
}

fn unit(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Jittered copies of three directions, so near-duplicates are common.
fn clustered(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f32>> {
    let bases: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|_| {
            let b = &bases[rng.random_range(0..3)];
            unit(b.iter().map(|x| x + rng.random_range(-0.2..0.2)).collect())
        })
        .collect()
}

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum::<f64>().clamp(-1.0, 1.0)
}

fn set_builder(v: &[Vec<f32>], tau: f64) -> BTreeSet<usize> {
    (0..v.len())
        .filter(|&i| (0..v.len()).filter(|&j| j != i).all(|j| cos64(&v[i], &v[j]) < tau))
        .collect()
}

fn tile(id: usize, gx: u64, gy: u64, attention: f64) -> PatchRecord {
    PatchRecord {
        patch_id: format!("p{id}"),
        level: 2,
        magnification: Magnification::X10,
        x: gx * 512,
        y: gy * 512,
        width: 512,
        height: 512,
        image_ref: PathBuf::new(),
        embedding: None,
        attention: Some(attention),
        metadata: BTreeMap::new(),
    }
}

/// Nearest-rank attention cut, core points by counting, core components by
/// transitive closure of reachability, border points to the lowest-indexed
/// core neighbour, components below `min_pts` dropped.
fn oracle_regions(tiles: &[PatchRecord], eps: f64, min_pts: usize, pct: f64) -> BTreeSet<BTreeSet<String>> {
    let mut scores: Vec<f64> = tiles.iter().map(|t| t.attention.unwrap()).collect();
    scores.sort_by(f64::total_cmp);
    let cut = scores[((pct * scores.len() as f64).ceil() as usize).clamp(1, scores.len()) - 1];
    let hot: Vec<&PatchRecord> = tiles.iter().filter(|t| t.attention.unwrap() >= cut).collect();
    let n = hot.len();
    let near = |i: usize, j: usize| {
        let dx = hot[i].x as f64 / 512.0 - hot[j].x as f64 / 512.0;
        let dy = hot[i].y as f64 / 512.0 - hot[j].y as f64 / 512.0;
        (dx * dx + dy * dy).sqrt() <= eps
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut reach: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| core[i] && core[j] && near(i, j)).collect()).collect();
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut owner: Vec<Option<usize>> = (0..n).map(|i| if core[i] { (0..n).find(|&j| reach[i][j]) } else { None }).collect();
    for i in 0..n {
        if !core[i] {
            owner[i] = (0..n).find(|&j| core[j] && near(i, j)).and_then(|j| owner[j]);
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for (i, o) in owner.iter().enumerate() {
        if let Some(o) = o {
            groups.entry(*o).or_default().insert(hot[i].patch_id.clone());
        }
    }
    groups.into_values().filter(|g| g.len() >= min_pts).collect()
}

// ---------------------------------------------------------------- CLI helpers

fn survagent(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_survagent"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> std::result::Result<String, String> {
    let out = survagent(dir, args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("`survagent {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn bundled_cohort(into: &Path) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synthetic");
    copy_tree(&src, into);
    into.to_path_buf()
}

fn copy_tree(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for e in std::fs::read_dir(src).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap();
        if name == "out" {
            continue;
        }
        if p.is_dir() {
            copy_tree(&p, &dst.join(name));
        } else {
            std::fs::copy(&p, dst.join(name)).unwrap();
        }
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.deserialize().map(|x| x.unwrap()).collect()
}

// ---------------------------------------------------------------- criteria

fn cindex_oracle() -> Check {
    let all = |n| vec![label(1.0, true), label(2.0, true), label(3.0, true)][..n].to_vec();
    let worked = [
        c_index(&[3.0, 2.0, 1.0], &all(3)).unwrap(),
        c_index(&[1.0, 2.0, 3.0], &all(3)).unwrap(),
        c_index(
            &[1.0, 2.0, 1.5, 1.2],
            &[label(10.0, true), label(5.0, true), label(8.0, false), label(20.0, true)],
        )
        .unwrap(),
    ];
    ensure!(worked == [1.0, 0.0, 0.75], "worked examples gave {worked:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut compared = 0;
    for _ in 0..2000 {
        let n = rng.random_range(2..=12);
        let risks: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let labels: Vec<SurvivalLabel> = (0..n)
            .map(|_| label(rng.random_range(1..10) as f64, rng.random_bool(0.7)))
            .collect();
        match (c_index(&risks, &labels), brute_cindex(&risks, &labels)) {
            (Ok(c), Some(b)) => {
                ensure!(c == b, "{c} vs brute force {b} on {risks:?} {labels:?}");
                compared += 1;
            }
            (Err(_), None) => {}
            (got, want) => return Err(format!("{got:?} vs {want:?}")),
        }
    }
    Ok(format!("worked examples 1.0/0.0/0.75; {compared}/2000 instances equal brute force"))
}

fn km_logrank() -> Check {
    let curve = km_curve(&[
        label(1.0, true),
        label(2.0, true),
        label(3.0, false),
        label(4.0, true),
        label(5.0, true),
    ]);
    let want = [0.8, 0.6, 0.6, 0.3, 0.0];
    let at = |t: f64| {
        let k = curve.times.iter().rposition(|x| *x <= t);
        k.map_or(1.0, |k| curve.survival[k])
    };
    for (t, w) in (1..=5).zip(want) {
        ensure!(close(at(t as f64), w, 1e-12), "S({t}) = {} want {w}", at(t as f64));
    }
    let a = [label(1.0, true), label(2.0, true)];
    let b = [label(3.0, true), label(4.0, true)];
    let lr = logrank(&a, &b).map_err(|e| e.to_string())?;
    ensure!(close(lr.chi2, 2.882, 1e-3) && close(lr.p_value, 0.0896, 1e-3), "chi2 {} p {}", lr.chi2, lr.p_value);
    // Hand table: O_A = 2, E_A = 5/6, V = 17/36.
    ensure!(close(lr.chi2, (2.0 - 5.0 / 6.0_f64).powi(2) / (17.0 / 36.0), 1e-12), "chi2 off the O/E/V table");
    let mut worst = 0.0_f64;
    for i in 0..=3000 {
        let x = i as f64 * 0.01;
        worst = worst.max((chi2_sf_1df(x) - gamma_q(0.5, x / 2.0)).abs());
    }
    ensure!(worst <= 1e-6, "chi2 tail deviates by {worst:e}");
    Ok(format!("S = {want:?}; chi2 {:.4} p {:.4}; tail max |err| {worst:.1e}", lr.chi2, lr.p_value))
}

fn cosmining() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut kept_total = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let (vis, txt) = (clustered(&mut rng, n), clustered(&mut rng, n));
        let (tv, tt) = (rng.random_range(0.5..1.0), rng.random_range(0.5..1.0));
        let (sv, st) = (pairwise_cosine(&vis).unwrap(), pairwise_cosine(&txt).unwrap());
        let got = cos_mine_select(&sv, &st, tv, tt, SelectionPolicy::Literal, None).map_err(|e| e.to_string())?;
        let want: Vec<usize> = set_builder(&vis, tv).intersection(&set_builder(&txt, tt)).copied().collect();
        ensure!(got == want, "Literal {got:?} vs set-builder {want:?}");
        kept_total += got.len();

        let lo = rng.random_range(0.3..0.99);
        let hi = rng.random_range(lo..=1.0);
        let a: BTreeSet<usize> = threshold_select(&sv, lo, SelectionPolicy::Literal, None).unwrap().into_iter().collect();
        let b: BTreeSet<usize> = threshold_select(&sv, hi, SelectionPolicy::Literal, None).unwrap().into_iter().collect();
        ensure!(a.is_subset(&b), "Literal not monotone in tau ({lo} -> {hi})");

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let g = threshold_select(&sv, tv, SelectionPolicy::Greedy, Some(&order)).unwrap();
        for (x, &i) in g.iter().enumerate() {
            for &j in &g[x + 1..] {
                ensure!(cos64(&vis[i], &vis[j]) < tv, "Greedy kept {i},{j} at similarity >= {tv}");
            }
        }
    }
    Ok(format!("1000 instances equal set-builder ({kept_total} kept); tau-monotone; Greedy pairs < tau"))
}

fn regions() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let base = RegionParams::default();
    ensure!(base.eps == 4.0 && base.min_pts == 10, "defaults eps {} min_pts {}", base.eps, base.min_pts);
    let mut found = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let span: u64 = rng.random_range(4..20);
        let mut cells = BTreeSet::new();
        while cells.len() < n.min((span * span) as usize) {
            cells.insert((rng.random_range(0..span), rng.random_range(0..span)));
        }
        let tiles: Vec<PatchRecord> = cells
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| tile(i, x, y, if rng.random_bool(0.3) { rng.random::<f64>() } else { 0.9 }))
            .collect();
        let params = RegionParams {
            attention_percentile: if rng.random_bool(0.5) { base.attention_percentile } else { 0.2 },
            ..base
        };
        let got: BTreeSet<BTreeSet<String>> = propose_regions(&tiles, &params)
            .into_iter()
            .map(|r| r.member_ids.into_iter().collect())
            .collect();
        let want = oracle_regions(&tiles, params.eps, params.min_pts, params.attention_percentile);
        ensure!(got == want, "regions {got:?} vs oracle {want:?}");
        found += want.len();
    }
    Ok(format!("200 grids equal the reachability oracle ({found} regions)"))
}

fn quartiles() -> Check {
    let q = compute_quartiles(&(1..=10).map(f64::from).collect::<Vec<_>>()).unwrap();
    ensure!((q.q25, q.q50, q.q75) == (3.0, 5.0, 8.0), "quartiles of 1..10 gave {q:?}");
    let q4 = compute_quartiles(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    ensure!((q4.q25, q4.q50, q4.q75) == (1.0, 2.0, 3.0), "quartiles of 1..4 gave {q4:?}");
    let strata = [3.0, 3.5, 8.0, 8.5].map(|s| map_risk_to_stratum(s, &q));
    ensure!(
        strata == [RiskStratum::Low, RiskStratum::LowIntermediate, RiskStratum::HighIntermediate, RiskStratum::High],
        "boundary mapping {strata:?}"
    );
    let transforms: [fn(f64) -> f64; 4] = [|x| 3.0 * x - 7.0, f64::exp, |x| x.powi(3) + x, f64::atan];
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for trial in 0..500 {
        let n = rng.random_range(4..60);
        let pop: Vec<f64> = (0..n).map(|_| (rng.random_range(-3.0..3.0_f64) * 4.0).round() / 4.0).collect();
        let query = if rng.random_bool(0.5) { pop[rng.random_range(0..n)] } else { rng.random_range(-4.0..4.0) };
        let f = transforms[trial % 4];
        let before = map_risk_to_stratum(query, &compute_quartiles(&pop).unwrap());
        let mapped: Vec<f64> = pop.iter().map(|x| f(*x)).collect();
        let after = map_risk_to_stratum(f(query), &compute_quartiles(&mapped).unwrap());
        ensure!(before == after, "trial {trial}: {before:?} became {after:?}");
    }
    Ok("nearest-rank examples reproduce; 500 monotone transforms keep the stratum".into())
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = bundled_cohort(&tmp.path().join(run));
        ok(&dir, &["build-bank", "--config", "config.toml"])?;
        let bank = dir.join("out/synthetic/full/bank");
        let (wsi, gene) = (jsonl(&bank.join("wsi_bank.jsonl")), jsonl(&bank.join("gene_bank.jsonl")));
        ensure!(wsi.len() == 20 && gene.len() == 20, "bank holds {} WSI + {} gene entries", wsi.len(), gene.len());
        for e in wsi.iter().chain(&gene) {
            ensure!(e["cot"]["quality"] == "High", "{} CoT not quality-checked", e["case_id"]);
        }
        let infer = ok(&dir, &["infer", "--config", "config.toml", "--jobs", if run == "a" { "1" } else { "4" }])?;
        ensure!(infer.lines().count() == 5, "infer printed {} lines", infer.lines().count());
        let holdout: Vec<String> = csv_rows(&dir.join("holdout.csv")).into_iter().map(|r| r["case_id"].clone()).collect();
        ensure!(holdout.len() == 5, "{} held-out cases", holdout.len());
        for id in &holdout {
            let p = dir.join(format!("out/synthetic/full/results/{id}.json"));
            let r: Value = serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?).unwrap();
            let t = r["predicted_months"].as_f64().unwrap();
            let lo = r["final_interval"]["lo"].as_f64().unwrap();
            let inside = t >= lo && r["final_interval"]["hi"].as_f64().is_none_or(|hi| t < hi);
            ensure!(inside, "{id}: {t} outside {}", r["final_interval"]);
            let retrieved = r["retrieved_case_ids"].as_array().unwrap();
            ensure!(retrieved.len() == 3, "{id}: {} retrieved", retrieved.len());
            ensure!(retrieved.iter().all(|c| !holdout.contains(&c.as_str().unwrap().to_string())), "{id}: retrieved a held-out case");
        }
        ok(&dir, &["evaluate", "--config", "config.toml"])?;
        trees.push(tree(&dir.join("out")));
    }
    ensure!(trees[0] == trees[1], "two runs differ");
    Ok(format!("20 WSI + 20 gene entries; 5 predictions in interval with 3 retrieved; {} output files byte-identical", trees[0].len()))
}

fn signal_recovery() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c100");
    ok(tmp.path(), &["synth", "--out", dir.to_str().unwrap(), "--cases", "100", "--holdout", "0", "--seed", "11"])?;
    ok(&dir, &["evaluate", "--config", "config.toml", "--jobs", "4"])?;
    // Per-fold C-index recomputed by brute force from the predictions.
    let rows = csv_rows(&dir.join("out/synthetic/predictions.csv"));
    ensure!(rows.len() == 100, "{} predictions", rows.len());
    let mut folds: BTreeMap<String, (Vec<f64>, Vec<SurvivalLabel>)> = BTreeMap::new();
    for r in &rows {
        let f = folds.entry(r["fold"].clone()).or_default();
        f.0.push(r["risk_score"].parse().unwrap());
        f.1.push(label(r["time"].parse().unwrap(), r["event"] == "1"));
    }
    let cs: Vec<f64> = folds.values().filter_map(|(r, l)| brute_cindex(r, l)).collect();
    ensure!(cs.len() == 5, "{} scorable folds", cs.len());
    let mean = cs.iter().sum::<f64>() / cs.len() as f64;
    let reported: Vec<f64> = csv_rows(&dir.join("out/cindex.csv")).iter().map(|r| r["c_index"].parse().unwrap()).collect();
    for (a, b) in cs.iter().zip(&reported) {
        ensure!(close(*a, *b, 5e-5), "reported fold C-index {b} vs recomputed {a}");
    }
    ensure!(mean >= 0.90, "five-fold C-index {mean:.3} < 0.90");
    Ok(format!("five-fold C-index {mean:.3} >= 0.90 on 100 cases"))
}

fn leakage_guards() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let dir = bundled_cohort(&tmp.path().join("leak"));
    ok(&dir, &["build-bank", "--config", "config.toml"])?;
    ok(&dir, &["build-bank", "--config", "config.toml", "--fold", "1"])?;

    // Plant a fold-1 test case in the fold-1 bank.
    let fold = dir.join("out/synthetic/fold1/bank");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(fold.join("manifest.json")).unwrap()).unwrap();
    let train: HashSet<&str> = manifest["cases"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    let full = CaseBank::load(&bank_file(&dir.join("out/synthetic/full/bank"), Modality::Wsi)).unwrap();
    let planted = full.entries().iter().find(|e| !train.contains(e.case_id.as_str())).unwrap().clone();
    let path = bank_file(&fold, Modality::Wsi);
    let mut bank = CaseBank::load(&path).unwrap();
    bank.append(planted.clone()).map_err(|e| e.to_string())?;
    let out = survagent(&dir, &["infer", "--config", "config.toml", "--fold", "1"]);
    let err = String::from_utf8_lossy(&out.stderr);
    ensure!(out.status.code() == Some(2) && err.contains("leakage"), "planted {} not caught: {err}", planted.case_id);

    // A held-out case listed in the training table.
    let dir2 = bundled_cohort(&tmp.path().join("overlap"));
    let held = std::fs::read_to_string(dir2.join("holdout.csv")).unwrap();
    let first = held.lines().nth(1).unwrap();
    let mut cases = std::fs::read_to_string(dir2.join("cases.csv")).unwrap();
    cases.push_str(first);
    cases.push('\n');
    std::fs::write(dir2.join("cases.csv"), cases).unwrap();
    let out = survagent(&dir2, &["build-bank", "--config", "config.toml"]);
    let err = String::from_utf8_lossy(&out.stderr);
    ensure!(out.status.code() == Some(2) && err.contains("leakage"), "train/holdout overlap not caught: {err}");

    // A result that retrieved its own case.
    let p = dir.join("out/synthetic/full/results");
    ok(&dir, &["infer", "--config", "config.toml"])?;
    let any = std::fs::read_dir(&p).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|x| x == "json")).unwrap();
    let mut r: InferenceResult = serde_json::from_str(&std::fs::read_to_string(any).unwrap()).unwrap();
    ensure!(check_self_exclusion(&r).is_ok(), "clean result flagged");
    r.retrieved_case_ids[0] = r.case_id.clone();
    ensure!(check_self_exclusion(&r).is_err(), "self-retrieval not flagged");
    Ok(format!("planted {} rejected; overlap rejected; self-retrieval flagged", planted.case_id))
}

fn cli_surface() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let dir = bundled_cohort(&tmp.path().join("cli"));
    ok(&dir, &["evaluate", "--config", "config.toml"])?;
    let first = std::fs::read(dir.join("out/cindex_table.md")).unwrap();
    let km = dir.join("out/synthetic/km.csv");
    let header = std::fs::read_to_string(&km).unwrap().lines().next().unwrap_or("").to_string();
    ensure!(header == "time,survival,at_risk,group", "KM header {header}");
    ok(&dir, &["plot", "--km-csv", km.to_str().unwrap(), "--out", "km.svg"])?;
    let svg = std::fs::read_to_string(dir.join("km.svg")).unwrap();
    ensure!(svg.matches("<polyline").count() == 2, "{} polylines", svg.matches("<polyline").count());
    let before = tree(&dir.join("out"));
    ok(&dir, &["evaluate", "--config", "config.toml"])?;
    ensure!(tree(&dir.join("out")) == before, "second evaluate changed outputs");
    ensure!(std::fs::read(dir.join("out/cindex_table.md")).unwrap() == first, "table changed");
    let usage = survagent(&dir, &["infer", "--fold"]).status.code();
    let runtime = survagent(&dir, &["evaluate", "--config", "missing.toml"]).status.code();
    ensure!(usage == Some(1) && runtime == Some(2), "exit codes usage {usage:?} runtime {runtime:?}");
    Ok("KM CSV schema; SVG with 2 step polylines; evaluate byte-identical; exit codes 1/2".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("cindex_oracle", Duration::from_secs(10), cindex_oracle),
        ("km_logrank", Duration::from_secs(5), km_logrank),
        ("cosmining_equivalence", Duration::from_secs(10), cosmining),
        ("region_proposal_oracle", Duration::from_secs(10), regions),
        ("quartile_strata", Duration::from_secs(10), quartiles),
        ("end_to_end_determinism", Duration::from_secs(60), end_to_end),
        ("signal_recovery", Duration::from_secs(300), signal_recovery),
        ("leakage_guards", Duration::from_secs(60), leakage_guards),
        ("cli_outputs", Duration::from_secs(60), cli_surface),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > budget => Err(format!("{msg}; over budget")),
            other => other,
        };
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("{tag} {name:<24} {:>7.2}s / {:>3}s  {msg}", took.as_secs_f64(), budget.as_secs());
        failed += usize::from(outcome.is_err());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
