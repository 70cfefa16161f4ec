use rand::Rng;

use super::Variant;
use crate::augmentation::{baseline_augment, exchange_and_sort, select_indices, AugmentKind};
use crate::data::{Event, ScoredTargets, TrainingInstance, Vocab};
use crate::error::{Error, Result};

/// The context the model reads for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceInput {
    /// Historical sessions as the long-term encoder sees them, oldest first.
    pub history: Vec<Vec<Event>>,
    pub past: Vec<Event>,
    pub recent: Vec<Event>,
    pub target_time: i64,
}

impl InstanceInput {
    /// With `divided = false` the whole history becomes one pseudo-session.
    pub fn from_instance(inst: &TrainingInstance, divided: bool) -> Self {
        let history = if divided {
            inst.historical.iter().map(|s| s.events.clone()).collect()
        } else {
            let flat = inst.flat_history();
            if flat.is_empty() {
                vec![]
            } else {
                vec![flat.events]
            }
        };
        Self {
            history,
            past: inst.past.events.clone(),
            recent: inst.recent.clone(),
            target_time: inst.target.timestamp,
        }
    }
}

/// Two augmented views of the current session for each instance that has
/// them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastiveViews {
    pub first: Vec<Vec<Event>>,
    pub second: Vec<Vec<Event>>,
}

impl ContrastiveViews {
    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// Everything needed for one forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub inputs: Vec<InstanceInput>,
    /// `(item, category)` of every scored candidate.
    pub candidates: Vec<(u32, u32)>,
    /// Instance index of each candidate.
    pub groups: Vec<usize>,
    pub labels: Vec<f64>,
    pub views: Option<ContrastiveViews>,
}

/// How contrastive views are produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewSpec {
    pub kind: AugmentKind,
    /// Selection ratio for exchange, or the baseline's ratio.
    pub ratio: f64,
}

/// Builds the two views for one instance, or `None` when it has no pair.
///
/// Exchange swaps events between the past and future sub-sessions. The
/// baselines augment the past sub-session twice, independently.
pub fn make_views<R: Rng>(inst: &TrainingInstance, spec: ViewSpec, rng: &mut R) -> Result<Option<(Vec<Event>, Vec<Event>)>> {
    if !inst.has_contrastive_pair() {
        return Ok(None);
    }
    let future = inst.future.as_ref().expect("checked by has_contrastive_pair");
    match spec.kind {
        AugmentKind::Exchange => {
            let plan = select_indices(&inst.past, future, spec.ratio, rng)?;
            let (p, f) = exchange_and_sort(&inst.past, future, &plan)?;
            Ok(Some((p.events, f.events)))
        }
        kind => {
            let a = baseline_augment(&inst.past, kind, spec.ratio, rng)?;
            let b = baseline_augment(&inst.past, kind, spec.ratio, rng)?;
            Ok(Some((a.events, b.events)))
        }
    }
}

/// Training batch: each instance scores its positive and the sampled
/// in-batch negatives. Views are built when `views` is given and the
/// variant uses the contrastive term.
pub fn prepare_training_batch<R: Rng>(
    batch: &[&TrainingInstance],
    targets: &[ScoredTargets],
    vocab: &Vocab,
    variant: Variant,
    views: Option<(ViewSpec, &mut R)>,
) -> Result<PreparedBatch> {
    if batch.len() != targets.len() {
        return Err(Error::Invalid("one scored-target list per instance required".into()));
    }
    let mut prepared = prepare_scoring_batch(
        batch,
        &targets.iter().map(|t| t.items.clone()).collect::<Vec<_>>(),
        vocab,
        variant,
    )?;
    prepared.labels = targets.iter().flat_map(|t| t.labels.iter().copied()).collect();
    if let (Some((spec, rng)), true) = (views, variant.uses_contrastive()) {
        let mut v = ContrastiveViews::default();
        for inst in batch {
            if let Some((a, b)) = make_views(inst, spec, rng)? {
                v.first.push(a);
                v.second.push(b);
            }
        }
        prepared.views = Some(v);
    }
    Ok(prepared)
}

/// Scores the given candidate items per instance; the first item of each
/// list is labelled positive. Evaluation instances must not carry a future
/// sub-session.
pub fn prepare_scoring_batch(
    batch: &[&TrainingInstance],
    candidates: &[Vec<u32>],
    vocab: &Vocab,
    variant: Variant,
) -> Result<PreparedBatch> {
    if batch.len() != candidates.len() {
        return Err(Error::Invalid("one candidate list per instance required".into()));
    }
    let mut out = PreparedBatch {
        inputs: Vec::with_capacity(batch.len()),
        candidates: Vec::new(),
        groups: Vec::new(),
        labels: Vec::new(),
        views: None,
    };
    for (i, (inst, cands)) in batch.iter().zip(candidates).enumerate() {
        if cands.is_empty() {
            return Err(Error::Empty(format!("instance {i} has no candidates")));
        }
        out.inputs.push(InstanceInput::from_instance(inst, variant.divides_history()));
        for (k, &item) in cands.iter().enumerate() {
            out.candidates.push((item, vocab.category_of(item)));
            out.groups.push(i);
            out.labels.push(if k == 0 { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}
