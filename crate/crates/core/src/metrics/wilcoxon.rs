use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::rank::midranks;
use crate::error::{Error, Result};

/// Largest pooled sample size handled by exact enumeration.
pub const EXACT_MAX: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// `x` tends to be larger than `y`.
    Greater,
    /// `x` tends to be smaller than `y`.
    Less,
}

fn pooled(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::contract("rank-sum test needs two non-empty samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank-sum test"));
    }
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&all);
    let w = ranks[..x.len()].iter().sum();
    Ok((ranks, w))
}

fn all_equal(x: &[f64], y: &[f64]) -> bool {
    x.iter().chain(y).all(|v| *v == x[0])
}

/// One-tailed rank-sum p-value: exact when `|x| + |y| <= 12`, otherwise a
/// tie-corrected normal approximation with continuity correction. Identical
/// values everywhere give `p = 1`.
pub fn wilcoxon_one_tailed(x: &[f64], y: &[f64], alt: Alternative) -> Result<f64> {
    if x.len() + y.len() <= EXACT_MAX {
        wilcoxon_exact(x, y, alt)
    } else {
        wilcoxon_normal(x, y, alt)
    }
}

/// Exact null distribution of the rank sum of `x` over every way of
/// choosing `|x|` of the pooled midranks, by dynamic programming over
/// doubled (integer) ranks.
pub fn wilcoxon_exact(x: &[f64], y: &[f64], alt: Alternative) -> Result<f64> {
    let (ranks, w) = pooled(x, y)?;
    if all_equal(x, y) {
        return Ok(1.0);
    }
    let n = x.len();
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled-rank sum s
    let mut ways = vec![vec![0f64; max_sum + 1]; n + 1];
    ways[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=n).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            for s in (r..=max_sum).rev() {
                hi[0][s] += lo[k - 1][s - r];
            }
        }
    }
    let total: f64 = ways[n].iter().sum();
    let w2 = (2.0 * w).round() as usize;
    let tail: f64 = match alt {
        Alternative::Greater => ways[n][w2..].iter().sum(),
        Alternative::Less => ways[n][..=w2].iter().sum(),
    };
    Ok(tail / total)
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
pub fn wilcoxon_normal(x: &[f64], y: &[f64], alt: Alternative) -> Result<f64> {
    let (_, w) = pooled(x, y)?;
    if all_equal(x, y) {
        return Ok(1.0);
    }
    let (n, m) = (x.len() as f64, y.len() as f64);
    let big_n = n + m;
    let mean = n * (big_n + 1.0) / 2.0;
    let mut sorted: Vec<f64> = x.iter().chain(y).copied().collect();
    sorted.sort_by(f64::total_cmp);
    let mut tie_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        let t = j as f64;
        tie_sum += t * t * t - t;
        i += j;
    }
    let var = n * m / 12.0 * ((big_n + 1.0) - tie_sum / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let std = Normal::standard();
    let sd = var.sqrt();
    Ok(match alt {
        Alternative::Greater => 1.0 - std.cdf((w - mean - 0.5) / sd),
        Alternative::Less => std.cdf((w - mean + 0.5) / sd),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_versus_three() {
        let p = wilcoxon_one_tailed(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], Alternative::Less).unwrap();
        assert_eq!(p, 0.05);
        let p = wilcoxon_one_tailed(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0], Alternative::Greater).unwrap();
        assert_eq!(p, 0.05);
        let p = wilcoxon_one_tailed(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], Alternative::Greater).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn identical_samples_give_no_evidence() {
        let x = [0.7, 0.71, 0.69, 0.72];
        assert!(wilcoxon_one_tailed(&x, &x, Alternative::Greater).unwrap() >= 0.5);
        assert_eq!(wilcoxon_one_tailed(&[2.0; 3], &[2.0; 4], Alternative::Greater).unwrap(), 1.0);
        assert_eq!(wilcoxon_normal(&[2.0; 9], &[2.0; 9], Alternative::Less).unwrap(), 1.0);
    }

    #[test]
    fn exact_with_ties() {
        // pooled midranks 1.5, 1.5, 3, 4; x takes {3, 4} → W = 7, the unique maximum
        let p = wilcoxon_exact(&[2.0, 3.0], &[1.0, 1.0], Alternative::Greater).unwrap();
        assert!((p - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn empty_sample_is_a_contract_error() {
        assert!(matches!(
            wilcoxon_one_tailed(&[], &[1.0], Alternative::Greater),
            Err(Error::Contract(_))
        ));
    }
}
