use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{contract_err, Error, Result};
use crate::specdec::BlockRecord;

/// Mean tokens per block: `mean(accepted) + 1`.
pub fn block_efficiency(accepted: &[usize]) -> Result<f64> {
    if accepted.is_empty() {
        return Err(Error::Domain("block efficiency of zero blocks".into()));
    }
    Ok(accepted.iter().sum::<usize>() as f64 / accepted.len() as f64 + 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub t_statistic: f64,
    /// Two-sided p-value; NaN when `degenerate`.
    pub p_value: f64,
    pub dof: f64,
    /// Both groups have zero variance, so the statistic is undefined.
    pub degenerate: bool,
}

impl SignificanceResult {
    /// One-sided p-value for the alternative `mean(a) > mean(b)`.
    pub fn p_greater(&self) -> f64 {
        if self.degenerate {
            return f64::NAN;
        }
        if self.t_statistic > 0.0 {
            self.p_value / 2.0
        } else {
            1.0 - self.p_value / 2.0
        }
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom and a two-sided Student-t p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Domain("welch test needs at least two samples per group".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(SignificanceResult {
            t_statistic: if ma == mb { 0.0 } else { (ma - mb).signum() * f64::INFINITY },
            p_value: f64::NAN,
            dof: f64::NAN,
            degenerate: true,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Numerical(format!("student t: {e}")))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(SignificanceResult { t_statistic: t, p_value: p, dof, degenerate: false })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThroughputKey {
    pub prompts_hash: String,
    pub hardware: String,
    pub max_new_tokens: usize,
    pub k: usize,
}

/// Throughput ratio `candidate / baseline`, refused across differing
/// prompts, hardware or budgets.
pub fn speedup(candidate_tps: f64, candidate: &ThroughputKey, baseline_tps: f64, baseline: &ThroughputKey) -> Result<f64> {
    if candidate != baseline {
        return Err(contract_err!("throughput comparison across different prompts, hardware or budgets"));
    }
    if !(baseline_tps > 0.0) {
        return Err(Error::Domain("baseline throughput must be positive".into()));
    }
    Ok(candidate_tps / baseline_tps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileBucket {
    /// `16·floor(position / 16) + 8`.
    pub center: usize,
    pub mean_accepted: f64,
    pub count: usize,
}

pub const PROFILE_WIDTH: usize = 16;

/// Mean accepted drafts per block, bucketed by the output position of each
/// block's last token.
pub fn positional_profile<'r>(blocks: impl IntoIterator<Item = &'r BlockRecord>) -> Vec<ProfileBucket> {
    let mut sums: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for b in blocks {
        let e = sums.entry(b.position / PROFILE_WIDTH).or_default();
        e.0 += b.accepted;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(bucket, (sum, count))| ProfileBucket {
            center: bucket * PROFILE_WIDTH + PROFILE_WIDTH / 2,
            mean_accepted: sum as f64 / count as f64,
            count,
        })
        .collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
