use std::collections::HashSet;

use rand::Rng;

use super::instance::TrainingInstance;
use crate::error::{Error, Result};

/// Items scored for one instance: the positive first, then negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTargets {
    pub items: Vec<u32>,
    pub labels: Vec<f64>,
}

/// Gives every instance `n - 1` negatives drawn from the positives of other
/// instances in the same batch, never equal to its own positive. Draws are
/// with replacement and proportional to how often an item is a positive.
pub fn sample_in_batch_negatives<R: Rng>(
    batch: &[TrainingInstance],
    n: usize,
    rng: &mut R,
) -> Result<Vec<ScoredTargets>> {
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 scored items per instance, got {n}")));
    }
    let distinct: HashSet<u32> = batch.iter().map(|i| i.target.item).collect();
    if distinct.len() < 2 {
        return Err(Error::Invalid(
            "batch has fewer than two distinct positive items; cannot sample negatives".into(),
        ));
    }
    let positives: Vec<u32> = batch.iter().map(|i| i.target.item).collect();
    Ok(batch
        .iter()
        .map(|inst| {
            let own = inst.target.item;
            let mut items = Vec::with_capacity(n);
            items.push(own);
            while items.len() < n {
                let cand = positives[rng.gen_range(0..positives.len())];
                if cand != own {
                    items.push(cand);
                }
            }
            let mut labels = vec![0.0; n];
            labels[0] = 1.0;
            ScoredTargets { items, labels }
        })
        .collect())
}
