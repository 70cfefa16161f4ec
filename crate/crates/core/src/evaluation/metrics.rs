use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One positive scored against its sampled negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPool {
    pub user: u32,
    pub target: f64,
    pub negatives: Vec<f64>,
}

impl RankedPool {
    pub fn new(user: u32, target: f64, negatives: Vec<f64>) -> Result<Self> {
        if !target.is_finite() || negatives.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score in pool of user {user}")));
        }
        Ok(Self { user, target, negatives })
    }

    /// 1-based rank of the positive; equal-scored negatives rank ahead of it.
    pub fn rank(&self) -> usize {
        1 + self.negatives.iter().filter(|&&s| s >= self.target).count()
    }
}

/// Mann-Whitney AUC of `(score, is_positive)` pairs; ties count one half.
pub fn auc_labeled(scored: &[(f64, bool)]) -> Result<f64> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid(format!("auc needs both classes, got {pos} positive and {neg} negative")));
    }
    if scored.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::NonFinite("auc score".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * sorted[i..=j].iter().filter(|s| s.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn flatten<'a>(pools: impl IntoIterator<Item = &'a RankedPool>) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for p in pools {
        out.push((p.target, true));
        out.extend(p.negatives.iter().map(|&s| (s, false)));
    }
    out
}

/// AUC over every positive and every negative of all pools.
pub fn auc(pools: &[RankedPool]) -> Result<f64> {
    auc_labeled(&flatten(pools))
}

/// Per-user AUC averaged with weights equal to each user's pool count.
/// Users whose AUC is undefined are skipped.
pub fn gauc(pools: &[RankedPool]) -> Result<f64> {
    let mut by_user: BTreeMap<u32, Vec<&RankedPool>> = BTreeMap::new();
    for p in pools {
        by_user.entry(p.user).or_default().push(p);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for group in by_user.values() {
        if let Ok(a) = auc_labeled(&flatten(group.iter().copied())) {
            let w = group.len() as f64;
            num += w * a;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::Invalid("no user has a computable auc".into()));
    }
    Ok(num / den)
}

/// Mean reciprocal rank of the positive.
pub fn mrr(pools: &[RankedPool]) -> Result<f64> {
    if pools.is_empty() {
        return Err(Error::Empty("mrr of no pools".into()));
    }
    Ok(pools.iter().map(|p| 1.0 / p.rank() as f64).sum::<f64>() / pools.len() as f64)
}

/// NDCG@k with a single relevant item.
pub fn ndcg_at_k(pools: &[RankedPool], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("ndcg cutoff must be at least 1".into()));
    }
    if pools.is_empty() {
        return Err(Error::Empty("ndcg of no pools".into()));
    }
    let gain = |r: usize| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 };
    Ok(pools.iter().map(|p| gain(p.rank())).sum::<f64>() / pools.len() as f64)
}

/// Relative decrease of a metric against its clean value.
pub fn drop_rate(clean: f64, noisy: f64) -> f64 {
    (clean - noisy) / clean
}
