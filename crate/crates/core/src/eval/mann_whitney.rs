//! One-sided Mann-Whitney U test with midranks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size (per side) tested by full enumeration.
pub const EXACT_MAX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u_a: f64,
    pub u_b: f64,
    /// P-value for the alternative "a tends to exceed b".
    pub p_greater: f64,
    /// P-value for the reverse alternative.
    pub p_less: f64,
    pub exact: bool,
}

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Null distribution of twice the U statistic of the first `n_a` slots,
/// over every way of choosing which pooled ranks belong to sample a.
/// Values are `(2U, probability)`.
pub fn exact_distribution(ranks: &[f64], n_a: usize) -> BTreeMap<i64, f64> {
    let (counts, total) = exact_counts(ranks, n_a);
    counts
        .into_iter()
        .map(|(u2, c)| (u2, c as f64 / total as f64))
        .collect()
}

fn exact_counts(ranks: &[f64], n_a: usize) -> (BTreeMap<i64, u64>, u64) {
    // Midranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<i64> = ranks.iter().map(|r| (r * 2.0).round() as i64).collect();
    let offset = (n_a * (n_a + 1)) as i64;
    let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
    let mut total = 0u64;
    fn walk(doubled: &[i64], start: usize, left: usize, sum: i64, counts: &mut BTreeMap<i64, u64>, total: &mut u64) {
        if left == 0 {
            *counts.entry(sum).or_default() += 1;
            *total += 1;
            return;
        }
        for i in start..=doubled.len() - left {
            walk(doubled, i + 1, left - 1, sum + doubled[i], counts, total);
        }
    }
    walk(&doubled, 0, n_a, -offset, &mut counts, &mut total);
    (counts, total)
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Stats("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Stats("Mann-Whitney sample contains NaN".into()));
    }
    Ok(())
}

fn pooled_ranks(a: &[f64], b: &[f64]) -> (Vec<f64>, f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let r_a: f64 = ranks[..a.len()].iter().sum();
    let u_a = r_a - na * (na + 1.0) / 2.0;
    (ranks, u_a, na * nb - u_a)
}

/// Test with `method`; `Auto` enumerates when both samples have at most
/// [`EXACT_MAX`] values and uses the normal approximation otherwise.
pub fn mann_whitney_u_with(a: &[f64], b: &[f64], method: Method) -> Result<MannWhitney> {
    check(a, b)?;
    let exact = match method {
        Method::Exact => true,
        Method::Normal => false,
        Method::Auto => a.len() <= EXACT_MAX && b.len() <= EXACT_MAX,
    };
    let (ranks, u_a, u_b) = pooled_ranks(a, b);
    let (p_greater, p_less) = if exact {
        let (counts, total) = exact_counts(&ranks, a.len());
        let obs = (u_a * 2.0).round() as i64;
        let ge: u64 = counts.range(obs..).map(|(_, c)| c).sum();
        let le: u64 = counts.range(..=obs).map(|(_, c)| c).sum();
        (ge as f64 / total as f64, le as f64 / total as f64)
    } else {
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let n = na + nb;
        let mut ties = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
            let t = j as f64;
            ties += t * t * t - t;
            i += j;
        }
        let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
        if var <= 0.0 {
            (1.0, 1.0)
        } else {
            let sd = var.sqrt();
            let mu = na * nb / 2.0;
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (
                normal.cdf(-(u_a - mu - 0.5) / sd),
                normal.cdf((u_a - mu + 0.5) / sd),
            )
        }
    };
    Ok(MannWhitney {
        u_a,
        u_b,
        p_greater,
        p_less,
        exact,
    })
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    mann_whitney_u_with(a, b, Method::Auto)
}
