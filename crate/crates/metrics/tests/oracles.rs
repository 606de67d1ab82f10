//! Metric and statistic implementations checked against brute-force oracles.

use mshvit_metrics::stats::midranks;
use mshvit_metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<SlidePredictionRecord> {
    (0..n)
        .map(|i| {
            let raw: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random_range(0.0..1.0f64)).collect();
            let total: f64 = raw.iter().sum();
            let mut scores = [0.0; NUM_CLASSES];
            for (s, r) in scores.iter_mut().zip(&raw) {
                *s = (r / total * 100.0 * 4.0).round() / 4.0;
            }
            let drift: f64 = 100.0 - scores.iter().sum::<f64>();
            scores[0] += drift;
            let predicted = (0..NUM_CLASSES)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                .unwrap();
            SlidePredictionRecord {
                slide_id: format!("s{i}"),
                true_class: rng.random_range(0..NUM_CLASSES),
                predicted_class: predicted,
                scores,
            }
        })
        .collect()
}

fn pair_auc(records: &[SlidePredictionRecord], class: usize) -> f64 {
    let pos: Vec<f64> = records.iter().filter(|r| r.true_class == class).map(|r| r.scores[class]).collect();
    let neg: Vec<f64> = records.iter().filter(|r| r.true_class != class).map(|r| r.scores[class]).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[test]
fn confusion_counts_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let recs = random_records(&mut rng, 200);
    for c in 0..NUM_CLASSES {
        let mut tally = [[0usize; 2]; 2];
        for r in &recs {
            for truth in 0..2 {
                for pred in 0..2 {
                    if (r.true_class == c) == (truth == 1) && (r.predicted_class == c) == (pred == 1) {
                        tally[truth][pred] += 1;
                    }
                }
            }
        }
        let got = confusion_counts(&recs, c);
        assert_eq!(got.tp, tally[1][1]);
        assert_eq!(got.fn_, tally[1][0]);
        assert_eq!(got.fp, tally[0][1]);
        assert_eq!(got.tn, tally[0][0]);
        assert_eq!(got.total(), recs.len());
    }
}

#[test]
fn auc_matches_pair_counting_on_random_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let recs = random_records(&mut rng, 1000);
    for c in 0..NUM_CLASSES {
        let pts = roc_curve(&recs, c).unwrap();
        assert!((auc(&pts) - pair_auc(&recs, c)).abs() < 1e-12);
    }
}

fn enumerate_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, _) = midranks(&pooled);
    let n = pooled.len();
    let na = a.len();
    let observed: f64 = ranks[..na].iter().sum();
    let (mut total, mut lo, mut hi) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
        total += 1;
        if s <= observed + 1e-9 {
            lo += 1;
        }
        if s >= observed - 1e-9 {
            hi += 1;
        }
    }
    (2.0 * lo.min(hi) as f64 / total as f64).min(1.0)
}

#[test]
fn wilcoxon_exact_matches_enumeration_up_to_ten() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 2..=10 {
        for na in 1..n {
            for trial in 0..3 {
                // trial 0: continuous values, trials 1-2: heavy ties
                let draw = |rng: &mut ChaCha8Rng| -> f64 {
                    if trial == 0 {
                        rng.random_range(0.0..1.0)
                    } else {
                        rng.random_range(0..4) as f64
                    }
                };
                let a: Vec<f64> = (0..na).map(|_| draw(&mut rng)).collect();
                let b: Vec<f64> = (0..n - na).map(|_| draw(&mut rng)).collect();
                let got = wilcoxon_rank_sum(&a, &b, WilcoxonMode::Exact).unwrap();
                let all_same = a.iter().chain(&b).all(|v| *v == a[0]);
                let expect = if all_same { 1.0 } else { enumerate_p(&a, &b) };
                assert!((got.p_value - expect).abs() < 1e-12, "{a:?} {b:?}: {} vs {}", got.p_value, expect);
            }
        }
    }
}

#[test]
fn wilcoxon_normal_close_to_exact_at_twelve() {
    for na in 4..=8 {
        let nb = 12 - na;
        // every achievable rank sum for untied data
        let lo = na * (na + 1) / 2;
        let hi = na * (2 * 12 - na + 1) / 2;
        for w in lo..=hi {
            // build samples whose first group takes a rank set summing to w
            let mut ranks: Vec<usize> = (1..=na).collect();
            let mut need = w - lo;
            for i in (0..na).rev() {
                let cap = 12 - (na - 1 - i) - ranks[i];
                let bump = need.min(cap);
                ranks[i] += bump;
                need -= bump;
            }
            let a: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
            let b: Vec<f64> = (1..=12).filter(|r| !ranks.contains(r)).map(|r| r as f64).collect();
            assert_eq!(b.len(), nb);
            let ex = wilcoxon_rank_sum(&a, &b, WilcoxonMode::Exact).unwrap();
            let no = wilcoxon_rank_sum(&a, &b, WilcoxonMode::Normal).unwrap();
            assert_eq!(ex.statistic, w as f64);
            assert!((ex.p_value - no.p_value).abs() < 0.02, "na={na} w={w}: {} vs {}", ex.p_value, no.p_value);
        }
    }
}

#[test]
fn auto_mode_switches_at_twelve() {
    let a: Vec<f64> = (0..6).map(f64::from).collect();
    let b: Vec<f64> = (6..12).map(f64::from).collect();
    assert!(wilcoxon_rank_sum(&a, &b, WilcoxonMode::Auto).unwrap().exact);
    let b: Vec<f64> = (6..13).map(f64::from).collect();
    assert!(!wilcoxon_rank_sum(&a, &b, WilcoxonMode::Auto).unwrap().exact);
}

fn normal_quantile(p: f64) -> f64 {
    use statrs_free::inverse_normal;
    inverse_normal(p)
}

mod statrs_free {
    /// Bisection on the complementary error function; independent of the crate's CDF.
    pub fn inverse_normal(p: f64) -> f64 {
        let cdf = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    // Taylor series below 3, asymptotic tail above.
    fn erf(x: f64) -> f64 {
        if x < 0.0 {
            return -erf(-x);
        }
        if x < 3.0 {
            let mut term = x;
            let mut sum = x;
            for n in 1..200 {
                term *= -x * x / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            2.0 / std::f64::consts::PI.sqrt() * sum
        } else {
            1.0 - (-x * x).exp() / (x * std::f64::consts::PI.sqrt()) * (1.0 - 1.0 / (2.0 * x * x))
        }
    }
}

#[test]
fn ks_at_normal_quantiles_is_small() {
    let n = 8;
    let x: Vec<f64> = (1..=n).map(|i| normal_quantile((i as f64 - 0.5) / n as f64)).collect();
    let r = ks_normality(&x).unwrap();
    assert!(r.statistic < 0.15, "D = {}", r.statistic);
}

fn gaussian_sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

#[test]
fn ks_separates_uniform_grid_from_gaussian_at_large_n() {
    // At n = 50 the gap is too small to resolve (uniform-grid D is about 0.065, below the
    // typical fitted-normal D of a Gaussian sample); n = 500 resolves it reliably.
    let n = 500;
    let grid: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let d_uniform = ks_normality(&grid).unwrap().statistic;
    let mut wins = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gaussian_sample(&mut rng, n);
        if d_uniform > ks_normality(&g).unwrap().statistic {
            wins += 1;
        }
    }
    assert!(wins >= 95, "uniform grid beat {wins}/100 Gaussian samples");
}

#[test]
fn ks_uniform_grid_at_fifty_is_not_separable() {
    let n = 50;
    let grid: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let d_uniform = ks_normality(&grid).unwrap().statistic;
    assert!((d_uniform - 0.0649).abs() < 1e-3);
    let wins = (0..100)
        .filter(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            d_uniform > ks_normality(&gaussian_sample(&mut rng, n)).unwrap().statistic
        })
        .count();
    assert!(wins < 95);
}

fn arb_records(max: usize) -> impl Strategy<Value = Vec<SlidePredictionRecord>> {
    prop::collection::vec((0..NUM_CLASSES, 0..NUM_CLASSES, prop::array::uniform5(0u8..6)), 2..max).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (t, p, raw))| {
                let total: f64 = raw.iter().map(|&v| v as f64 + 1.0).sum();
                let mut scores = [0.0; NUM_CLASSES];
                for (s, &r) in scores.iter_mut().zip(&raw) {
                    *s = (r as f64 + 1.0) / total * 100.0;
                }
                SlidePredictionRecord {
                    slide_id: i.to_string(),
                    true_class: t,
                    predicted_class: p,
                    scores,
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn auc_equals_mann_whitney(recs in arb_records(30), class in 0..NUM_CLASSES) {
        if let Ok(pts) = roc_curve(&recs, class) {
            let got = auc(&pts);
            prop_assert!((got - pair_auc(&recs, class)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn count_identities(recs in arb_records(60)) {
        let mut tp_total = 0;
        let mut pos_total = 0;
        for c in 0..NUM_CLASSES {
            let counts = confusion_counts(&recs, c);
            tp_total += counts.tp;
            pos_total += counts.positives();
            let m = class_metrics(&counts);
            let (pos, neg) = (counts.positives() as f64, counts.negatives() as f64);
            let weighted = m.sensitivity.unwrap_or(0.0) * pos + m.specificity.unwrap_or(0.0) * neg;
            prop_assert!((m.accuracy.unwrap() - weighted / (pos + neg)).abs() < 1e-12);
        }
        let correct = recs.iter().filter(|r| r.true_class == r.predicted_class).count();
        prop_assert_eq!(tp_total, correct);
        prop_assert_eq!(pos_total, recs.len());
    }

    #[test]
    fn patch_accuracy_is_order_invariant(
        slides in prop::collection::vec(
            (0..NUM_CLASSES, prop::collection::vec((0..NUM_CLASSES, 0..NUM_CLASSES, 0.0f64..1.0), 1..12)),
            1..8),
        seed in 0u64..1000,
    ) {
        let recs: Vec<PatchPredictionRecord> = slides.iter().enumerate().map(|(i, (c, patches))| PatchPredictionRecord {
            slide_id: i.to_string(),
            slide_true_class: *c,
            predicted: patches.iter().map(|p| p.0).collect(),
            truth: patches.iter().map(|p| p.1).collect(),
            foreground: patches.iter().map(|p| p.2).collect(),
        }).collect();
        let base = patch_accuracy(&recs, 0.1, PatchNormalization::MaskedMean).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = recs.clone();
        shuffled.reverse();
        for r in &mut shuffled {
            let n = r.truth.len();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                r.predicted.swap(i, j);
                r.truth.swap(i, j);
                r.foreground.swap(i, j);
            }
        }
        let again = patch_accuracy(&shuffled, 0.1, PatchNormalization::MaskedMean).unwrap();
        for c in 0..NUM_CLASSES {
            match (base.per_class[c], again.per_class[c]) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
