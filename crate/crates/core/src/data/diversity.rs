//! Category-diversity diagnostics for sessions.

use std::collections::{BTreeMap, BTreeSet};

use super::session::Session;
use crate::error::{Error, Result};

fn category_counts(sess: &Session) -> BTreeMap<u32, usize> {
    let mut counts = BTreeMap::new();
    for e in &sess.events {
        *counts.entry(e.category).or_insert(0) += 1;
    }
    counts
}

/// Shannon entropy (natural log) of the session's category distribution.
pub fn session_entropy(sess: &Session) -> Result<f64> {
    if sess.is_empty() {
        return Err(Error::Empty("entropy of an empty session".into()));
    }
    let n = sess.len() as f64;
    Ok(category_counts(sess)
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Gini coefficient of category counts over `support`, with categories absent
/// from the session counted as zero. 0 means perfectly even spread; a single
/// category gives `(m - 1) / m`.
pub fn session_gini(sess: &Session, support: &BTreeSet<u32>) -> Result<f64> {
    if support.is_empty() {
        return Err(Error::Invalid("empty category support".into()));
    }
    if sess.is_empty() {
        return Err(Error::Empty("gini of an empty session".into()));
    }
    let counts = category_counts(sess);
    if let Some(c) = counts.keys().find(|c| !support.contains(c)) {
        return Err(Error::Invalid(format!("category {c} outside support")));
    }
    let mut xs: Vec<f64> = support
        .iter()
        .map(|c| counts.get(c).copied().unwrap_or(0) as f64)
        .collect();
    Ok(gini_of_counts(&mut xs))
}

/// Sorted-rank form of the mean-absolute-difference Gini coefficient.
pub fn gini_of_counts(xs: &mut [f64]) -> f64 {
    let m = xs.len() as f64;
    let total: f64 = xs.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let weighted: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - m - 1.0) * x)
        .sum();
    weighted / (m * total)
}
