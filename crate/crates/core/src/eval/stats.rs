use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Success rate of the probe tested on one relation group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group_id: String,
    pub n: usize,
    pub p: f64,
    pub se: f64,
}

impl GroupResult {
    pub fn new(group_id: impl Into<String>, p: f64, n: usize) -> Result<Self> {
        Ok(GroupResult {
            group_id: group_id.into(),
            n,
            p,
            se: standard_error(p, n)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub p: f64,
    pub wse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub groups: Vec<GroupResult>,
}

/// Binomial standard error `sqrt(p(1 - p) / n)`.
pub fn standard_error(p: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Stats("standard error of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Stats(format!("rate {p} outside [0, 1]")));
    }
    Ok((p * (1.0 - p) / n as f64).sqrt())
}

/// Pools group results: `P = Σ n_i p_i / N`,
/// `WSE = sqrt(Σ (n_i / N · SE_i)²)`, and the interval `P ± 1.96 · WSE`.
pub fn aggregate(groups: &[GroupResult]) -> Result<AggregateResult> {
    let total: usize = groups.iter().map(|g| g.n).sum();
    if groups.is_empty() || total == 0 {
        return Err(Error::Stats("nothing to aggregate".into()));
    }
    let n = total as f64;
    let p = groups.iter().map(|g| g.n as f64 * g.p).sum::<f64>() / n;
    let wse = groups
        .iter()
        .map(|g| (g.n as f64 / n * g.se).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(AggregateResult {
        p,
        wse,
        ci_low: p - Z_95 * wse,
        ci_high: p + Z_95 * wse,
        groups: groups.to_vec(),
    })
}
