use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survagent::datamodel::SurvivalLabel;
use survagent::survstats::{c_index, chi2_sf_1df, km_curve, logrank};
use survagent::Error;

fn label(t: f64, e: bool) -> SurvivalLabel {
    SurvivalLabel::new(t, e).unwrap()
}

/// Every ordered pair, straight from the definition.
fn brute_cindex(risks: &[f64], labels: &[SurvivalLabel]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            let (a, b) = (labels[i], labels[j]);
            if a.time_months < b.time_months && a.event {
                den += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<SurvivalLabel>) {
    let n = rng.random_range(2..=12);
    // Small integer pools force both risk ties and time ties.
    let risks = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
    let labels = (0..n)
        .map(|_| label(rng.random_range(1..10) as f64, rng.random_bool(0.7)))
        .collect();
    (risks, labels)
}

#[test]
fn cindex_matches_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut undefined = 0;
    for _ in 0..2000 {
        let (r, l) = random_instance(&mut rng);
        match (c_index(&r, &l), brute_cindex(&r, &l)) {
            (Ok(c), Some(b)) => assert_eq!(c, b, "{r:?} {l:?}"),
            (Err(Error::NoComparablePairs), None) => undefined += 1,
            (got, want) => panic!("{got:?} vs {want:?} on {r:?} {l:?}"),
        }
    }
    assert!(undefined < 200);
}

#[test]
fn cindex_flips_under_negation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..300 {
        let n = rng.random_range(2..=12);
        let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let l: Vec<SurvivalLabel> = (0..n).map(|_| label(rng.random_range(1.0..50.0), rng.random_bool(0.7))).collect();
        let neg: Vec<f64> = r.iter().map(|x| -x).collect();
        if let (Ok(a), Ok(b)) = (c_index(&r, &l), c_index(&neg, &l)) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cindex_of_noise_is_near_half() {
    let mut inside = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let l: Vec<SurvivalLabel> = (0..1000).map(|_| label(rng.random_range(1.0..100.0), true)).collect();
        let c = c_index(&r, &l).unwrap();
        if (0.45..=0.55).contains(&c) {
            inside += 1;
        }
    }
    assert!(inside >= 99);
}

#[test]
fn km_matches_direct_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let n = rng.random_range(1..=15);
        let l: Vec<SurvivalLabel> = (0..n).map(|_| label(rng.random_range(1..8) as f64, rng.random_bool(0.6))).collect();
        let curve = km_curve(&l);
        for (k, &t) in curve.times.iter().enumerate() {
            let mut s = 1.0;
            for &u in curve.times.iter().take(k + 1) {
                let at_risk = l.iter().filter(|x| x.time_months >= u).count() as f64;
                let deaths = l.iter().filter(|x| x.event && x.time_months == u).count() as f64;
                s *= 1.0 - deaths / at_risk;
            }
            assert!((curve.survival[k] - s).abs() < 1e-12, "t={t}");
            if k > 0 {
                assert!(curve.survival[k] <= curve.survival[k - 1]);
            }
        }
    }
}

#[test]
fn logrank_ignores_group_names() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let mut g = || -> Vec<SurvivalLabel> {
            (0..rng.random_range(1..8))
                .map(|_| label(rng.random_range(1..10) as f64, rng.random_bool(0.7)))
                .collect()
        };
        let (a, b) = (g(), g());
        match (logrank(&a, &b), logrank(&b, &a)) {
            (Ok(x), Ok(y)) => {
                assert!((x.chi2 - y.chi2).abs() < 1e-9);
                assert!((x.p_value - y.p_value).abs() < 1e-9);
            }
            (Err(Error::NoEvents), Err(Error::NoEvents)) => {}
            other => panic!("{other:?}"),
        }
    }
}

/// Regularized upper incomplete gamma Q(a, x): power series below a + 1,
/// Lentz continued fraction above.
fn gamma_q(a: f64, x: f64, ln_gamma_a: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let prefactor = (-x + a * x.ln() - ln_gamma_a).exp();
    if x < a + 1.0 {
        let (mut term, mut sum, mut ap) = (1.0 / a, 1.0 / a, a);
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        1.0 - sum * prefactor
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
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
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        prefactor * h
    }
}

#[test]
fn chi2_tail_matches_incomplete_gamma() {
    let ln_gamma_half = 0.5 * std::f64::consts::PI.ln();
    let mut x = 0.0;
    while x <= 30.0 {
        let want = gamma_q(0.5, x / 2.0, ln_gamma_half);
        assert!((chi2_sf_1df(x) - want).abs() < 1e-6, "x={x}");
        x += 0.05;
    }
    assert!((chi2_sf_1df(3.841) - 0.05).abs() < 5e-4);
}
