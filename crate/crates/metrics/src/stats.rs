//! Two-sided Wilcoxon rank-sum test and a Kolmogorov–Smirnov normality check.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{MetricError, Result};

/// Pooled size at or below which [`WilcoxonMode::Auto`] uses the exact null distribution.
pub const EXACT_MAX_POOLED: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMode {
    #[default]
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Rank sum of the first sample under midranks.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`, plus the sizes of every tie group.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64], mode: WilcoxonMode) -> Result<WilcoxonResult> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Argument("rank-sum test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::Argument("rank-sum test given a non-finite value".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let w: f64 = ranks[..a.len()].iter().sum();
    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::Normal => false,
        WilcoxonMode::Auto => pooled.len() <= EXACT_MAX_POOLED,
    };
    if ties.len() == 1 {
        return Ok(WilcoxonResult {
            statistic: w,
            p_value: 1.0,
            exact,
        });
    }
    let p_value = if exact {
        exact_p(&ranks, a.len(), w)
    } else {
        normal_p(a.len(), b.len(), &ties, w)
    };
    Ok(WilcoxonResult {
        statistic: w,
        p_value,
        exact,
    })
}

/// Null distribution of the doubled rank sum over all size-`na` subsets, by counting DP.
fn exact_p(ranks: &[f64], na: usize, w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: subsets of size k with doubled sum s
    let mut counts = vec![vec![0.0f64; max_sum + 1]; na + 1];
    counts[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=na).rev() {
            for s in (r..=max_sum).rev() {
                let c = counts[k - 1][s - r];
                if c != 0.0 {
                    counts[k][s] += c;
                }
            }
        }
    }
    let observed = (w * 2.0).round() as usize;
    let dist = &counts[na];
    let total: f64 = dist.iter().sum();
    let lower: f64 = dist[..=observed].iter().sum();
    let upper: f64 = dist[observed..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

fn normal_p(na: usize, nb: usize, ties: &[usize], w: f64) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    let n = na + nb;
    let mean = na * (n + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let dev = w - mean;
    let cc = if dev == 0.0 { 0.0 } else { 0.5 * dev.signum() };
    let corrected = dev - cc;
    let z = corrected / var.sqrt();
    let std = Normal::standard();
    (2.0 * std.cdf(-z.abs())).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    /// Asymptotic Kolmogorov p-value; approximate because the normal's parameters are
    /// estimated from the same sample.
    pub p_value: f64,
}

/// One-sample KS statistic against a normal fitted with the sample mean and std.
pub fn ks_normality(x: &[f64]) -> Result<KsResult> {
    if x.len() < 4 {
        return Err(MetricError::Argument(format!(
            "normality test needs at least 4 values, got {}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::Argument("normality test given a non-finite value".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(MetricError::Degenerate("sample has zero variance".into()));
    }
    let std = var.sqrt();
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let unit = Normal::standard();
    let mut d: f64 = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        let f = unit.cdf((v - mean) / std);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let sq = n.sqrt();
    let p_value = kolmogorov_q((sq + 0.12 + 0.11 / sq) * d);
    Ok(KsResult {
        statistic: d,
        p_value,
    })
}

/// Tail of the Kolmogorov distribution, `2 Σ (-1)^(k-1) exp(-2 k² λ²)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `**` for p < 0.01, `*` for p < 0.05, empty otherwise.
pub fn significance_marker(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_have_p_one() {
        let a = [1.0, 2.0, 3.0];
        for mode in [WilcoxonMode::Exact, WilcoxonMode::Normal] {
            assert_eq!(wilcoxon_rank_sum(&a, &a, mode).unwrap().p_value, 1.0);
        }
        let c = [4.0; 3];
        assert_eq!(wilcoxon_rank_sum(&c, &c, WilcoxonMode::Auto).unwrap().p_value, 1.0);
    }

    #[test]
    fn two_by_two_exact() {
        let r = wilcoxon_rank_sum(&[1.0, 2.0], &[3.0, 4.0], WilcoxonMode::Auto).unwrap();
        assert!(r.exact);
        assert_eq!(r.statistic, 3.0);
        assert!((r.p_value - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_sample_is_error() {
        assert!(wilcoxon_rank_sum(&[], &[1.0], WilcoxonMode::Auto).is_err());
    }

    #[test]
    fn midranks_handle_ties() {
        let (r, t) = midranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![1, 1, 2]);
    }

    #[test]
    fn ks_bounds_and_errors() {
        let d = ks_normality(&[0.1, 0.5, 0.2, 3.0, 0.3]).unwrap();
        assert!((0.0..=1.0).contains(&d.statistic));
        assert!((0.0..=1.0).contains(&d.p_value));
        assert!(matches!(ks_normality(&[1.0; 6]), Err(MetricError::Degenerate(_))));
        assert!(ks_normality(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn markers() {
        assert_eq!(significance_marker(0.004), "**");
        assert_eq!(significance_marker(0.03), "*");
        assert_eq!(significance_marker(0.05), "");
    }
}
