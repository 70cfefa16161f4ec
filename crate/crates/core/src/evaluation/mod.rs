//! Ranking and accuracy metrics, the sampled-pool evaluation protocol and
//! the per-behavior gate analysis.

mod metrics;

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{auc, auc_labeled, drop_rate, gauc, mrr, ndcg_at_k, RankedPool};

use crate::data::{Behavior, TrainingInstance, Vocab};
use crate::error::{Error, Result};
use crate::model::{prepare_scoring_batch, Lsidn, Variant};
use crate::numerics::ParamStore;

/// Draws `m` distinct negatives per instance, uniformly from the items its
/// user never interacted with. Each list starts with the positive.
pub fn sample_candidates<R: Rng>(
    instances: &[TrainingInstance],
    interacted: &HashMap<u32, HashSet<u32>>,
    vocab: &Vocab,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>> {
    let items = vocab.item_ids();
    let total = items.len();
    instances
        .iter()
        .map(|inst| {
            let seen = interacted.get(&inst.user);
            let n_seen = seen.map_or(0, HashSet::len);
            if total.saturating_sub(n_seen.max(1)) < m {
                return Err(Error::Invalid(format!(
                    "user {} has fewer than {m} non-interacted items",
                    inst.user
                )));
            }
            let mut out = vec![inst.target.item];
            let mut taken = HashSet::new();
            while out.len() <= m {
                let it = rng.gen_range(items.clone());
                if it != inst.target.item && !seen.is_some_and(|s| s.contains(&it)) && taken.insert(it) {
                    out.push(it);
                }
            }
            Ok(out)
        })
        .collect()
}

/// Rejects instances that carry a future sub-session.
pub fn audit_no_future(instances: &[TrainingInstance]) -> Result<()> {
    match instances.iter().position(|i| i.future.is_some()) {
        Some(k) => Err(Error::Invalid(format!("evaluation instance {k} carries a future sub-session"))),
        None => Ok(()),
    }
}

/// Scores every candidate list and returns one pool per instance along with
/// the gate value of each positive.
pub fn score_pools(
    model: &Lsidn,
    store: &ParamStore,
    variant: Variant,
    instances: &[TrainingInstance],
    candidates: &[Vec<u32>],
    vocab: &Vocab,
    batch: usize,
) -> Result<(Vec<RankedPool>, Vec<f64>)> {
    audit_no_future(instances)?;
    if instances.len() != candidates.len() {
        return Err(Error::Invalid("one candidate list per instance required".into()));
    }
    if instances.is_empty() {
        return Err(Error::Empty("no evaluation instances".into()));
    }
    let mut pools = Vec::with_capacity(instances.len());
    let mut alphas = Vec::with_capacity(instances.len());
    for (chunk, cands) in instances.chunks(batch.max(1)).zip(candidates.chunks(batch.max(1))) {
        let refs: Vec<&TrainingInstance> = chunk.iter().collect();
        let prepared = prepare_scoring_batch(&refs, cands, vocab, variant)?;
        let (scores, alpha) = model.score(store, &prepared, variant)?;
        let mut at = 0;
        for (inst, c) in chunk.iter().zip(cands) {
            let s = &scores[at..at + c.len()];
            pools.push(RankedPool::new(inst.user, s[0], s[1..].to_vec())?);
            alphas.push(alpha[at]);
            at += c.len();
        }
    }
    Ok((pools, alphas))
}

/// Every metric of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pools: usize,
    pub auc: f64,
    pub gauc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl EvalReport {
    pub fn from_pools(pools: &[RankedPool]) -> Result<Self> {
        Ok(Self {
            pools: pools.len(),
            auc: auc(pools)?,
            gauc: gauc(pools)?,
            mrr: mrr(pools)?,
            ndcg5: ndcg_at_k(pools, 5)?,
            ndcg10: ndcg_at_k(pools, 10)?,
        })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.named().into_iter().find(|(n, _)| *n == metric).map(|(_, v)| v)
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("auc", self.auc),
            ("gauc", self.gauc),
            ("mrr", self.mrr),
            ("ndcg@5", self.ndcg5),
            ("ndcg@10", self.ndcg10),
        ]
    }

    pub fn records(&self, split: &str, variant: Variant, seed: u64) -> Vec<MetricRecord> {
        self.named()
            .into_iter()
            .map(|(metric, value)| MetricRecord {
                metric: metric.to_string(),
                value,
                split: split.to_string(),
                variant: variant.slug().to_string(),
                seed,
            })
            .collect()
    }
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub split: String,
    pub variant: String,
    pub seed: u64,
}

/// Mean gate value over the instances whose target has one behavior type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaGroup {
    pub behavior: Behavior,
    pub mean_alpha: f64,
    pub count: usize,
}

/// Groups `(behavior, alpha)` pairs and averages each group. Behavior types
/// with no instance are left out.
pub fn group_alpha_means(pairs: &[(Behavior, f64)]) -> Vec<AlphaGroup> {
    let mut acc: BTreeMap<Behavior, (f64, usize)> = BTreeMap::new();
    for &(b, a) in pairs {
        let e = acc.entry(b).or_default();
        e.0 += a;
        e.1 += 1;
    }
    for b in Behavior::ALL {
        if !acc.contains_key(&b) {
            log::warn!("no instance with behavior `{b}`; group omitted");
        }
    }
    acc.into_iter()
        .map(|(behavior, (sum, count))| AlphaGroup {
            behavior,
            mean_alpha: sum / count as f64,
            count,
        })
        .collect()
}

/// Gate value of every instance scored against its own target, averaged
/// per target behavior.
pub fn alpha_split_analysis(
    model: &Lsidn,
    store: &ParamStore,
    variant: Variant,
    instances: &[TrainingInstance],
    vocab: &Vocab,
    batch: usize,
) -> Result<Vec<AlphaGroup>> {
    let alphas = collect_alphas(model, store, variant, instances, vocab, batch)?;
    let pairs: Vec<(Behavior, f64)> = instances.iter().map(|i| i.target.behavior).zip(alphas).collect();
    Ok(group_alpha_means(&pairs))
}

/// Gate value of each instance against its own target.
pub fn collect_alphas(
    model: &Lsidn,
    store: &ParamStore,
    variant: Variant,
    instances: &[TrainingInstance],
    vocab: &Vocab,
    batch: usize,
) -> Result<Vec<f64>> {
    audit_no_future(instances)?;
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch.max(1)) {
        let refs: Vec<&TrainingInstance> = chunk.iter().collect();
        let cands: Vec<Vec<u32>> = chunk.iter().map(|i| vec![i.target.item]).collect();
        let prepared = prepare_scoring_batch(&refs, &cands, vocab, variant)?;
        out.extend(model.score(store, &prepared, variant)?.1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
