use std::collections::{HashMap, HashSet};

use rand::Rng;

use super::config::ExperimentConfig;
use crate::data::{prefix_expand, sess_div, EventLog, TrainingInstance, Vocab};
use crate::error::{Error, Result};

/// Instances split by time plus what evaluation needs to sample negatives.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<TrainingInstance>,
    pub val: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
    /// Every item each user interacted with, over the whole log.
    pub interacted: HashMap<u32, HashSet<u32>>,
    pub omega_seconds: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Dataset {
    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            users: self.vocab.num_users(),
            items: self.vocab.num_items(),
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }
}

/// Divides each user's most recent `max_seq_len` events into sessions and
/// expands them into instances. Targets in a user's last session are test
/// instances and those in the one before are validation instances; users
/// with fewer than three sessions only contribute training instances.
/// Validation and test instances never carry a future sub-session.
pub fn build_dataset(log: &EventLog, cfg: &ExperimentConfig) -> Result<Dataset> {
    let omega = cfg.omega_seconds();
    let mut out = Dataset {
        vocab: log.vocab.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        interacted: HashMap::new(),
        omega_seconds: omega,
    };
    for seq in &log.sequences {
        out.interacted
            .entry(seq.user)
            .or_default()
            .extend(seq.events.iter().map(|e| e.item));
        let mut seq = seq.clone();
        seq.truncate_recent(cfg.max_seq_len);
        let sessions = sess_div(&seq.events, omega)?;
        let k = sessions.len();
        for mut inst in prefix_expand(&sessions, cfg.expand_params()) {
            if k >= 3 && inst.session_index == k - 1 {
                inst.future = None;
                out.test.push(inst);
            } else if k >= 3 && inst.session_index == k - 2 {
                inst.future = None;
                out.val.push(inst);
            } else {
                out.train.push(inst);
            }
        }
    }
    Ok(out)
}

/// Appends `floor(rate * n)` adversarial instances: copies of random
/// instances whose target is replaced by an item the user never touched.
pub fn inject_noise<R: Rng>(
    instances: &[TrainingInstance],
    interacted: &HashMap<u32, HashSet<u32>>,
    vocab: &Vocab,
    rate: f64,
    rng: &mut R,
) -> Result<Vec<TrainingInstance>> {
    if !(0.0..=0.5).contains(&rate) {
        return Err(Error::Invalid(format!("noise rate must lie in [0, 0.5], got {rate}")));
    }
    let extra = (rate * instances.len() as f64).floor() as usize;
    let mut out = instances.to_vec();
    let items = vocab.item_ids();
    for _ in 0..extra {
        let mut inst = instances[rng.gen_range(0..instances.len())].clone();
        let seen = interacted.get(&inst.user);
        if seen.map_or(0, HashSet::len) >= items.len() {
            return Err(Error::Invalid(format!("user {} interacted with every item", inst.user)));
        }
        let item = loop {
            let it = rng.gen_range(items.clone());
            if !seen.is_some_and(|s| s.contains(&it)) {
                break it;
            }
        };
        inst.target.item = item;
        inst.target.category = vocab.category_of(item);
        inst.label = 1;
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{synthetic_log, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data() -> (EventLog, Dataset) {
        let spec = SyntheticSpec {
            n_users: 60,
            n_items: 150,
            n_categories: 6,
            ..SyntheticSpec::default()
        };
        let log = synthetic_log(&spec).unwrap();
        let cfg = ExperimentConfig {
            max_seq_len: 1000,
            ..ExperimentConfig::default()
        };
        let d = build_dataset(&log, &cfg).unwrap();
        (log, d)
    }

    #[test]
    fn splits_follow_time_and_hide_the_future() {
        let (log, d) = data();
        let total: usize = log.sequences.iter().map(|s| s.events.len() - 1).sum();
        assert_eq!(d.train.len() + d.val.len() + d.test.len(), total);
        assert!(d.val.iter().chain(&d.test).all(|i| i.future.is_none()));
        assert!(d.test.iter().all(|i| i.session_index == 5));
        assert!(d.val.iter().all(|i| i.session_index == 4));
        for inst in d.train.iter().chain(&d.val).chain(&d.test) {
            inst.check_invariants(d.omega_seconds).unwrap();
        }
    }

    #[test]
    fn no_test_event_reaches_training() {
        let (_, d) = data();
        let test_events: HashSet<(u32, i64)> = d.test.iter().map(|i| (i.user, i.target.timestamp)).collect();
        for inst in &d.train {
            let ctx = inst
                .historical
                .iter()
                .flat_map(|s| &s.events)
                .chain(&inst.past.events)
                .chain(inst.future.iter().flat_map(|f| &f.events))
                .chain(&inst.recent)
                .chain(std::iter::once(&inst.target));
            for e in ctx {
                assert!(!test_events.contains(&(e.user, e.timestamp)));
            }
        }
    }

    #[test]
    fn noise_injection_counts_and_membership() {
        let (_, d) = data();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let same = inject_noise(&d.train, &d.interacted, &d.vocab, 0.0, &mut rng).unwrap();
        assert_eq!(same, d.train);
        let noisy = inject_noise(&d.train[..1000], &d.interacted, &d.vocab, 0.1, &mut rng).unwrap();
        assert_eq!(noisy.len(), 1100);
        assert_eq!(noisy[..1000], d.train[..1000]);
        for inst in &noisy[1000..] {
            assert!(!d.interacted[&inst.user].contains(&inst.target.item));
            assert_eq!(inst.target.category, d.vocab.category_of(inst.target.item));
        }
        assert!(inject_noise(&d.train, &d.interacted, &d.vocab, 0.6, &mut rng).is_err());
    }
}
