use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survagent::datamodel::{Magnification, PatchRecord};
use survagent::wsi::similarity::cos_mine_select;
use survagent::wsi::{pairwise_cosine, propose_regions, threshold_select, RegionParams, SelectionPolicy, SimilarityMatrix};

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

/// A few base directions plus jitter, so near-duplicates are common.
fn clustered(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f32>> {
    let d = 4;
    let bases: Vec<Vec<f32>> = (0..3).map(|_| random_unit(rng, d)).collect();
    (0..n)
        .map(|_| {
            let b = &bases[rng.random_range(0..bases.len())];
            let v: Vec<f64> = b.iter().map(|x| f64::from(*x) + rng.random_range(-0.2..0.2)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// `{i : for all j != i, sim(i, j) < tau}`, recomputed from the raw vectors.
fn set_builder(v: &[Vec<f32>], tau: f64, s: &SimilarityMatrix) -> BTreeSet<usize> {
    (0..v.len())
        .filter(|&i| (0..v.len()).filter(|&j| j != i).all(|j| s.get(i, j) < tau))
        .collect()
}

#[test]
fn literal_equals_set_builder_intersection() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let vis = clustered(&mut rng, n);
        let txt = clustered(&mut rng, n);
        let (sv, st) = (pairwise_cosine(&vis).unwrap(), pairwise_cosine(&txt).unwrap());
        for i in 0..n {
            for j in 0..n {
                assert!((sv.get(i, j) - dot(&vis[i], &vis[j]).clamp(-1.0, 1.0)).abs() < 1e-6);
            }
        }
        let tau_v = rng.random_range(0.5..1.0);
        let tau_t = rng.random_range(0.5..1.0);
        let got = cos_mine_select(&sv, &st, tau_v, tau_t, SelectionPolicy::Literal, None).unwrap();
        let want: Vec<usize> = set_builder(&vis, tau_v, &sv)
            .intersection(&set_builder(&txt, tau_t, &st))
            .copied()
            .collect();
        assert_eq!(got, want);
    }
}

#[test]
fn literal_grows_with_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..300 {
        let n = rng.random_range(1..=20);
        let s = pairwise_cosine(&clustered(&mut rng, n)).unwrap();
        let lo = rng.random_range(0.3..0.99);
        let hi = rng.random_range(lo..=1.0);
        let a: BTreeSet<usize> = threshold_select(&s, lo, SelectionPolicy::Literal, None).unwrap().into_iter().collect();
        let b: BTreeSet<usize> = threshold_select(&s, hi, SelectionPolicy::Literal, None).unwrap().into_iter().collect();
        assert!(a.is_subset(&b));
    }
}

#[test]
fn greedy_keeps_no_similar_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..300 {
        let n = rng.random_range(1..=20);
        let s = pairwise_cosine(&clustered(&mut rng, n)).unwrap();
        let tau = rng.random_range(0.5..1.0);
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let kept = threshold_select(&s, tau, SelectionPolicy::Greedy, Some(&order)).unwrap();
        assert!(!kept.is_empty());
        for (x, &i) in kept.iter().enumerate() {
            for &j in &kept[x + 1..] {
                assert!(s.get(i, j) < tau);
            }
        }
        // Every dropped item is close to something kept.
        for i in (0..n).filter(|i| !kept.contains(i)) {
            assert!(kept.iter().any(|&k| s.get(i, k) >= tau));
        }
    }
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
        image_ref: Default::default(),
        embedding: None,
        attention: Some(attention),
        metadata: Default::default(),
    }
}

/// Regions from first principles: attention cut by nearest rank, core points
/// by counting, components of the core-reachability relation by transitive
/// closure, border points to the lowest-indexed core neighbour.
fn oracle_regions(tiles: &[PatchRecord], eps: f64, min_pts: usize, pct: f64) -> BTreeSet<BTreeSet<String>> {
    let mut scores: Vec<f64> = tiles.iter().map(|t| t.attention.unwrap()).collect();
    scores.sort_by(f64::total_cmp);
    let rank = ((pct * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let cut = scores[rank - 1];
    let hot: Vec<&PatchRecord> = tiles.iter().filter(|t| t.attention.unwrap() >= cut).collect();
    let n = hot.len();
    let pos = |t: &PatchRecord| ((t.x / 512) as f64, (t.y / 512) as f64);
    let near = |i: usize, j: usize| {
        let (a, b) = (pos(hot[i]), pos(hot[j]));
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= eps
    };
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = core[i] && core[j] && near(i, j);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if core[i] {
            owner[i] = (0..n).find(|&j| reach[i][j]);
        }
    }
    for i in 0..n {
        if !core[i] {
            owner[i] = (0..n).find(|&j| core[j] && near(i, j)).and_then(|j| owner[j]);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, BTreeSet<String>> = Default::default();
    for i in 0..n {
        if let Some(o) = owner[i] {
            groups.entry(o).or_default().insert(hot[i].patch_id.clone());
        }
    }
    groups.into_values().filter(|g| g.len() >= min_pts).collect()
}

#[test]
fn regions_match_reachability_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let params = RegionParams::default();
    let mut nonempty = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let span = rng.random_range(4..20);
        let mut cells = BTreeSet::new();
        while cells.len() < n.min(span * span) {
            cells.insert((rng.random_range(0..span), rng.random_range(0..span)));
        }
        // Attention is mostly high so the percentile cut keeps enough points
        // to form regions; the cut still applies.
        let tiles: Vec<PatchRecord> = cells
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| tile(i, x as u64, y as u64, if rng.random_bool(0.3) { rng.random::<f64>() } else { 0.9 }))
            .collect();
        let params = RegionParams {
            attention_percentile: if rng.random_bool(0.5) { params.attention_percentile } else { 0.2 },
            ..params
        };
        let got: BTreeSet<BTreeSet<String>> = propose_regions(&tiles, &params)
            .into_iter()
            .map(|r| r.member_ids.into_iter().collect())
            .collect();
        let want = oracle_regions(&tiles, params.eps, params.min_pts, params.attention_percentile);
        if !want.is_empty() {
            nonempty += 1;
        }
        assert_eq!(got, want);
    }
    assert!(nonempty > 20, "oracle exercised only {nonempty} non-empty cases");
}
