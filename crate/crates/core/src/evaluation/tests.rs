use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{prefix_expand, sess_div, Event, ExpandParams};
use crate::encoders::EncoderConfig;
use crate::model::ModelConfig;

fn world(seed: u64) -> (Vocab, Vec<TrainingInstance>, HashMap<u32, HashSet<u32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vocab::new();
    let cats: Vec<u32> = (0..4).map(|c| vocab.category(&format!("c{c}"))).collect();
    let items: Vec<u32> = (0..80).map(|i| vocab.item(&format!("i{i}"), cats[i % 4])).collect();
    let mut instances = Vec::new();
    let mut seen: HashMap<u32, HashSet<u32>> = HashMap::new();
    for u in 0..4 {
        let user = vocab.user(&format!("u{u}"));
        let mut t = 0;
        let events: Vec<Event> = (0..12)
            .map(|k| {
                t += if k % 4 == 0 { 100_000 } else { 60 };
                let item = items[rng.gen_range(0..20)];
                seen.entry(user).or_default().insert(item);
                Event {
                    user,
                    item,
                    category: vocab.category_of(item),
                    behavior: Behavior::ALL[k % 4],
                    timestamp: t,
                }
            })
            .collect();
        let params = ExpandParams {
            recent: 5,
            history: 2,
            session_len: 4,
        };
        for mut inst in prefix_expand(&sess_div(&events, 3600).unwrap(), params) {
            inst.future = None;
            instances.push(inst);
        }
    }
    (vocab, instances, seen)
}

fn model(vocab: &Vocab) -> (ParamStore, Lsidn) {
    let mut store = ParamStore::new();
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            dim: 8,
            heads: 2,
            ffn_mult: 2,
            positions: true,
            max_positions: 10,
            init_scale: 0.3,
        },
        item_rows: vocab.num_item_rows(),
        category_rows: Some(vocab.num_categories() + 1),
    };
    let m = Lsidn::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    (store, m)
}

#[test]
fn candidates_are_distinct_unseen_negatives() {
    let (vocab, instances, seen) = world(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cands = sample_candidates(&instances, &seen, &vocab, 49, &mut rng).unwrap();
    for (inst, c) in instances.iter().zip(&cands) {
        assert_eq!(c.len(), 50);
        assert_eq!(c[0], inst.target.item);
        let distinct: HashSet<u32> = c.iter().copied().collect();
        assert_eq!(distinct.len(), 50);
        assert!(c[1..].iter().all(|i| !seen[&inst.user].contains(i)));
    }
    let again = sample_candidates(&instances, &seen, &vocab, 49, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(cands, again);
    assert!(sample_candidates(&instances, &seen, &vocab, 75, &mut rng).is_err());
}

#[test]
fn evaluation_refuses_future_sub_sessions() {
    let (vocab, mut instances, seen) = world(3);
    let (store, m) = model(&vocab);
    let cands = sample_candidates(&instances, &seen, &vocab, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    instances[3].future = Some(instances[3].past.clone());
    assert!(score_pools(&m, &store, Variant::Full, &instances, &cands, &vocab, 8).is_err());
    assert!(collect_alphas(&m, &store, Variant::Full, &instances, &vocab, 8).is_err());
}

#[test]
fn pools_do_not_depend_on_batching() {
    let (vocab, instances, seen) = world(5);
    let (store, m) = model(&vocab);
    let cands = sample_candidates(&instances, &seen, &vocab, 9, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (a, alpha_a) = score_pools(&m, &store, Variant::Full, &instances, &cands, &vocab, 1).unwrap();
    let (b, alpha_b) = score_pools(&m, &store, Variant::Full, &instances, &cands, &vocab, 7).unwrap();
    assert_eq!(a.len(), instances.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x.target - y.target).abs() < 1e-12);
        for (p, q) in x.negatives.iter().zip(&y.negatives) {
            assert!((p - q).abs() < 1e-12);
        }
    }
    for (x, y) in alpha_a.iter().zip(&alpha_b) {
        assert!((x - y).abs() < 1e-12);
    }
    let report = EvalReport::from_pools(&a).unwrap();
    for (_, v) in report.named() {
        assert!((0.0..=1.0).contains(&v));
    }
    let recs = report.records("test", Variant::NoSd, 9);
    assert_eq!(recs.len(), 5);
    assert!(recs.iter().all(|r| r.variant == "wo-sd" && r.seed == 9 && r.split == "test"));
    assert_eq!(report.get("ndcg@10"), Some(report.ndcg10));
}

#[test]
fn alpha_groups_average_collected_values() {
    let pairs = [
        (Behavior::Click, 0.2),
        (Behavior::Click, 0.4),
        (Behavior::Click, 0.9),
        (Behavior::Purchase, 0.5),
        (Behavior::Purchase, 0.6),
        (Behavior::Purchase, 0.7),
    ];
    let groups = group_alpha_means(&pairs);
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].behavior, Behavior::Click);
    assert!((groups[0].mean_alpha - 0.5).abs() < 1e-15);
    assert_eq!(groups[0].count, 3);
    assert!((groups[1].mean_alpha - 0.6).abs() < 1e-15);

    let one = group_alpha_means(&[(Behavior::Cart, 0.3), (Behavior::Cart, 0.5)]);
    assert_eq!(one.len(), 1);
    assert!((one[0].mean_alpha - 0.4).abs() < 1e-15);
}

#[test]
fn alpha_analysis_matches_hand_averages() {
    let (vocab, instances, _) = world(7);
    let (store, m) = model(&vocab);
    let alphas = collect_alphas(&m, &store, Variant::Full, &instances, &vocab, 5).unwrap();
    let groups = alpha_split_analysis(&m, &store, Variant::Full, &instances, &vocab, 5).unwrap();
    for g in &groups {
        let mine: Vec<f64> = instances
            .iter()
            .zip(&alphas)
            .filter(|(i, _)| i.target.behavior == g.behavior)
            .map(|(_, &a)| a)
            .collect();
        assert_eq!(mine.len(), g.count);
        assert!((mine.iter().sum::<f64>() / mine.len() as f64 - g.mean_alpha).abs() < 1e-12);
    }
    let again = alpha_split_analysis(&m, &store, Variant::Full, &instances, &vocab, 3).unwrap();
    for (a, b) in groups.iter().zip(&again) {
        assert!((a.mean_alpha - b.mean_alpha).abs() < 1e-12);
    }
}
