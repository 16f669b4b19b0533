//! Censoring-aware evaluation: concordance, Kaplan-Meier, log-rank, risk
//! splits and fold assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::SurvivalLabel;
use crate::error::{Error, Result};

/// Nearest-rank percentile of ascending-sorted data: the value at 1-indexed
/// rank `ceil(p * n)` (at least 1).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "nearest_rank on empty data");
    let n = sorted.len();
    // guard against p * n landing a hair above an integer
    let rank = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Harrell's concordance index.
///
/// A pair is comparable when the two times differ and the shorter one is an
/// observed event; equal-time pairs are never comparable. A comparable pair is
/// concordant when the shorter-lived subject has the higher risk; tied risks
/// count one half.
pub fn c_index(risks: &[f64], labels: &[SurvivalLabel]) -> Result<f64> {
    if risks.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: risks.len(),
        });
    }
    if risks.len() < 2 {
        return Err(Error::NoComparablePairs);
    }
    // Walk time groups from the longest down, keeping the risks of everyone
    // strictly later in a sorted buffer.
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| labels[b].time_months.total_cmp(&labels[a].time_months));
    let mut later: Vec<f64> = Vec::with_capacity(risks.len());
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let t = labels[order[start]].time_months;
        let mut end = start;
        while end < order.len() && labels[order[end]].time_months == t {
            end += 1;
        }
        for &i in &order[start..end] {
            if !labels[i].event {
                continue;
            }
            let r = risks[i];
            let below = later.partition_point(|&x| x < r);
            let not_above = later.partition_point(|&x| x <= r);
            concordant += below as u64;
            tied += (not_above - below) as u64;
            comparable += later.len() as u64;
        }
        for &i in &order[start..end] {
            let pos = later.partition_point(|&x| x < risks[i]);
            later.insert(pos, risks[i]);
        }
        start = end;
    }
    if comparable == 0 {
        return Err(Error::NoComparablePairs);
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Every distinct observed time, ascending.
    pub times: Vec<f64>,
    /// Survival just after each time; implicitly 1.0 before the first.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub deaths: Vec<usize>,
    pub censored: Vec<usize>,
}

/// Product-limit estimator.
pub fn km_curve(labels: &[SurvivalLabel]) -> KmCurve {
    let mut sorted: Vec<SurvivalLabel> = labels.to_vec();
    sorted.sort_by(|a, b| a.time_months.total_cmp(&b.time_months));
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        deaths: Vec::new(),
        censored: Vec::new(),
    };
    let mut s = 1.0;
    let mut at_risk = sorted.len();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time_months;
        let (mut d, mut c) = (0, 0);
        while i < sorted.len() && sorted[i].time_months == t {
            if sorted[i].event {
                d += 1;
            } else {
                c += 1;
            }
            i += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
        }
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(at_risk);
        curve.deaths.push(d);
        curve.censored.push(c);
        at_risk -= d + c;
    }
    curve
}

impl KmCurve {
    /// `S(t)`: survival at time `t` (right-continuous step function).
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi2: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

/// Two-group log-rank test with hypergeometric variance.
pub fn logrank(a: &[SurvivalLabel], b: &[SurvivalLabel]) -> Result<LogRank> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("log-rank needs two non-empty groups".into()));
    }
    if !a.iter().chain(b).any(|l| l.event) {
        return Err(Error::NoEvents);
    }
    let mut times: Vec<f64> = a.iter().chain(b).filter(|l| l.event).map(|l| l.time_months).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let at_risk = |g: &[SurvivalLabel], t: f64| g.iter().filter(|l| l.time_months >= t).count() as f64;
    let deaths = |g: &[SurvivalLabel], t: f64| g.iter().filter(|l| l.event && l.time_months == t).count() as f64;

    let (mut o_a, mut e_a, mut var) = (0.0, 0.0, 0.0);
    for &t in &times {
        let (n_a, n_b) = (at_risk(a, t), at_risk(b, t));
        let n = n_a + n_b;
        let d_a = deaths(a, t);
        let d = d_a + deaths(b, t);
        o_a += d_a;
        e_a += d * n_a / n;
        if n > 1.0 {
            var += d * (n - d) * n_a * n_b / (n * n * (n - 1.0));
        }
    }
    if var == 0.0 {
        return Ok(LogRank {
            chi2: 0.0,
            p_value: 1.0,
            observed_a: o_a,
            expected_a: e_a,
            variance: 0.0,
        });
    }
    let chi2 = (o_a - e_a).powi(2) / var;
    Ok(LogRank {
        chi2,
        p_value: chi2_sf_1df(chi2),
        observed_a: o_a,
        expected_a: e_a,
        variance: var,
    })
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1df(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    statrs::function::erf::erfc((x / 2.0).sqrt())
}

/// `(high, low)` index groups: risk above the median is high, the rest low.
pub fn median_split(risks: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if risks.len() < 2 {
        return Err(Error::DegenerateSplit);
    }
    let m = median(risks);
    let (high, low): (Vec<usize>, Vec<usize>) = (0..risks.len()).partition(|&i| risks[i] > m);
    if high.is_empty() || low.is_empty() {
        return Err(Error::DegenerateSplit);
    }
    Ok((high, low))
}

/// Average of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seeded shuffle, then round-robin into `k` folds.
pub fn kfold<T: Clone>(ids: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if k == 0 || ids.len() < k {
        return Err(Error::TooFewCases { n: ids.len(), k });
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(folds)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// `0.683±0.022`
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.3}±{s:.3}")
}

/// Three significant figures, e.g. `8.96e-2`.
pub fn format_p(p: f64) -> String {
    format!("{p:.2e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(times: &[f64], events: &[u8]) -> Vec<SurvivalLabel> {
        times
            .iter()
            .zip(events)
            .map(|(&t, &e)| SurvivalLabel::new(t, e == 1).unwrap())
            .collect()
    }

    #[test]
    fn perfect_concordance_and_discordance() {
        let l = labels(&[1.0, 2.0, 3.0], &[1, 1, 1]);
        assert_eq!(c_index(&[3.0, 2.0, 1.0], &l).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0, 2.0, 3.0], &l).unwrap(), 0.0);
    }

    #[test]
    fn censored_worked_example() {
        let l = labels(&[10.0, 5.0, 8.0, 20.0], &[1, 1, 0, 1]);
        assert_eq!(c_index(&[1.0, 2.0, 1.5, 1.2], &l).unwrap(), 0.75);
    }

    #[test]
    fn risk_ties_count_half() {
        let l = labels(&[1.0, 2.0], &[1, 1]);
        assert_eq!(c_index(&[5.0, 5.0], &l).unwrap(), 0.5);
    }

    #[test]
    fn no_comparable_pairs() {
        let l = labels(&[1.0, 2.0], &[0, 0]);
        assert!(matches!(c_index(&[1.0, 2.0], &l), Err(Error::NoComparablePairs)));
        let l = labels(&[3.0, 3.0], &[1, 1]);
        assert!(matches!(c_index(&[1.0, 2.0], &l), Err(Error::NoComparablePairs)));
    }

    #[test]
    fn km_worked_example() {
        let c = km_curve(&labels(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1, 1, 0, 1, 1]));
        assert_eq!(c.times, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let expected = [0.8, 0.6, 0.6, 0.3, 0.0];
        for (s, e) in c.survival.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12, "{s} vs {e}");
        }
        assert_eq!(c.at_risk, vec![5, 4, 3, 2, 1]);
        assert_eq!(c.at(0.5), 1.0);
        assert!((c.at(3.5) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn km_degenerate_inputs() {
        let c = km_curve(&labels(&[1.0, 2.0, 3.0], &[0, 0, 0]));
        assert!(c.survival.iter().all(|&s| s == 1.0));
        let c = km_curve(&labels(&[2.0], &[1]));
        assert_eq!(c.survival, vec![0.0]);
    }

    #[test]
    fn logrank_worked_example() {
        let a = labels(&[1.0, 2.0], &[1, 1]);
        let b = labels(&[3.0, 4.0], &[1, 1]);
        let r = logrank(&a, &b).unwrap();
        assert!((r.expected_a - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.variance - 17.0 / 36.0).abs() < 1e-12);
        assert!((r.chi2 - 2.882).abs() < 1e-3);
        assert!((r.p_value - 0.0896).abs() < 1e-3);
        let s = logrank(&b, &a).unwrap();
        assert!((s.chi2 - r.chi2).abs() < 1e-12);
        assert!((s.p_value - r.p_value).abs() < 1e-12);
    }

    #[test]
    fn logrank_identical_groups() {
        let a = labels(&[1.0, 3.0, 5.0], &[1, 0, 1]);
        let r = logrank(&a, &a.clone()).unwrap();
        assert_eq!(r.chi2, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(matches!(logrank(&labels(&[1.0], &[0]), &labels(&[2.0], &[0])), Err(Error::NoEvents)));
    }

    #[test]
    fn chi2_tail_reference_points() {
        assert_eq!(chi2_sf_1df(0.0), 1.0);
        assert!((chi2_sf_1df(3.841) - 0.05).abs() < 5e-4);
        assert!((chi2_sf_1df(2.882) - 0.0896).abs() < 5e-4);
    }

    #[test]
    fn median_split_rules() {
        assert_eq!(median_split(&[1.0, 2.0, 3.0, 4.0]).unwrap(), (vec![2, 3], vec![0, 1]));
        assert!(matches!(median_split(&[5.0, 5.0, 5.0]), Err(Error::DegenerateSplit)));
        assert_eq!(median_split(&[1.0, 2.0, 2.0, 3.0]).unwrap(), (vec![3], vec![0, 1, 2]));
    }

    #[test]
    fn kfold_sizes_and_determinism() {
        let ids: Vec<u32> = (0..10).collect();
        let f = kfold(&ids, 5, 1).unwrap();
        assert!(f.iter().all(|x| x.len() == 2));
        let ids: Vec<u32> = (0..11).collect();
        let f = kfold(&ids, 5, 1).unwrap();
        let sizes: Vec<usize> = f.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        let mut all: Vec<u32> = f.concat();
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(f, kfold(&ids, 5, 1).unwrap());
        assert!(matches!(kfold(&ids[..3], 5, 0), Err(Error::TooFewCases { n: 3, k: 5 })));
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(
            (nearest_rank(&v, 0.25), nearest_rank(&v, 0.5), nearest_rank(&v, 0.75)),
            (2.0, 4.0, 6.0)
        );
        let v: Vec<f64> = (0..120).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.9), 107.0);
    }

    #[test]
    fn formatting() {
        assert_eq!(format_mean_std(&[0.7, 0.7]), "0.700±0.000");
        assert_eq!(format_p(0.0896), "8.96e-2");
        assert_eq!(format_p(1.24e-27), "1.24e-27");
    }
}
