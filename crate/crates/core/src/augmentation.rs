//! Views of the current session used by the contrastive objective.
//!
//! The default view pair swaps a random fraction of events between the past
//! and future sub-sessions and re-sorts each side by timestamp. Crop, mask
//! and reorder are the single-sequence baselines it is compared against.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Event, Session, MASK_ITEM};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Exchange,
    Crop,
    Mask,
    Reorder,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::Exchange,
        AugmentKind::Crop,
        AugmentKind::Mask,
        AugmentKind::Reorder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::Exchange => "exchange",
            AugmentKind::Crop => "crop",
            AugmentKind::Mask => "mask",
            AugmentKind::Reorder => "reorder",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation `{s}`")))
    }
}

/// Which positions of each sub-session move to the other side.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionPlan {
    pub past_selected: Vec<usize>,
    pub future_selected: Vec<usize>,
    pub gamma: f64,
}

fn selection_size(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64).floor() as usize).min(n)
}

/// Picks `floor(gamma * |past|)` past positions and `floor(gamma * |future|)`
/// future positions uniformly at random. Indices come back sorted.
pub fn select_indices<R: Rng>(past: &Session, future: &Session, gamma: f64, rng: &mut R) -> Result<SelectionPlan> {
    if past.is_empty() || future.is_empty() {
        return Err(Error::Empty("exchange augmentation needs both sub-sessions".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Invalid(format!("selection ratio {gamma} outside [0, 1]")));
    }
    let mut pick = |n: usize| {
        let mut v = sample(rng, n, selection_size(n, gamma)).into_vec();
        v.sort_unstable();
        v
    };
    let past_selected = pick(past.len());
    let future_selected = pick(future.len());
    Ok(SelectionPlan {
        past_selected,
        future_selected,
        gamma,
    })
}

fn check_plan(indices: &[usize], len: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; len];
    for &i in indices {
        if i >= len || mask[i] {
            return Err(Error::Invalid(format!("selection index {i} invalid for length {len}")));
        }
        mask[i] = true;
    }
    Ok(mask)
}

/// Moves the selected past events into the future side and vice versa, then
/// sorts each side by timestamp. Equal timestamps put events that came from
/// the past sub-session first, then keep original order.
pub fn exchange_and_sort(past: &Session, future: &Session, plan: &SelectionPlan) -> Result<(Session, Session)> {
    let past_mask = check_plan(&plan.past_selected, past.len())?;
    let future_mask = check_plan(&plan.future_selected, future.len())?;

    // (timestamp, side, original position, event)
    let mut new_past: Vec<(i64, u8, usize, Event)> = Vec::new();
    let mut new_future: Vec<(i64, u8, usize, Event)> = Vec::new();
    for (i, e) in past.events.iter().enumerate() {
        let dst = if past_mask[i] { &mut new_future } else { &mut new_past };
        dst.push((e.timestamp, 0, i, *e));
    }
    for (i, e) in future.events.iter().enumerate() {
        let dst = if future_mask[i] { &mut new_past } else { &mut new_future };
        dst.push((e.timestamp, 1, i, *e));
    }
    let finish = |mut v: Vec<(i64, u8, usize, Event)>, index: usize| {
        v.sort_by_key(|&(t, side, pos, _)| (t, side, pos));
        Session::new(index, v.into_iter().map(|x| x.3).collect())
    };
    Ok((finish(new_past, past.index), finish(new_future, future.index)))
}

/// Applies crop, mask or reorder to a single session.
pub fn baseline_augment<R: Rng>(sess: &Session, kind: AugmentKind, ratio: f64, rng: &mut R) -> Result<Session> {
    if sess.is_empty() {
        return Err(Error::Empty("cannot augment an empty session".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("augmentation ratio {ratio} outside (0, 1)")));
    }
    let n = sess.len();
    let mut events = sess.events.clone();
    match kind {
        AugmentKind::Crop => {
            let len = ((1.0 - ratio) * n as f64).ceil() as usize;
            if len == 0 {
                return Err(Error::Empty("crop produced an empty session".into()));
            }
            let start = rng.gen_range(0..=n - len);
            events = events[start..start + len].to_vec();
        }
        AugmentKind::Mask => {
            let k = selection_size(n, ratio);
            for i in sample(rng, n, k) {
                events[i].item = MASK_ITEM;
            }
        }
        AugmentKind::Reorder => {
            let w = selection_size(n, ratio);
            let start = rng.gen_range(0..=n - w);
            events[start..start + w].shuffle(rng);
        }
        AugmentKind::Exchange => {
            return Err(Error::Invalid("exchange needs both sub-sessions; use exchange_and_sort".into()));
        }
    }
    Ok(Session::new(sess.index, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Behavior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn ev(item: u32, t: i64) -> Event {
        Event {
            user: 0,
            item,
            category: item % 3,
            behavior: Behavior::Click,
            timestamp: t,
        }
    }

    fn items(s: &Session) -> Vec<u32> {
        s.events.iter().map(|e| e.item).collect()
    }

    fn random_session<R: Rng>(rng: &mut R, n: usize, t0: i64) -> Session {
        let mut t = t0;
        Session::new(
            0,
            (0..n)
                .map(|_| {
                    t += rng.gen_range(0..5);
                    ev(rng.gen_range(1..10), t)
                })
                .collect(),
        )
    }

    #[test]
    fn selection_sizes_follow_floor_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let past = random_session(&mut rng, 3, 0);
        let future = random_session(&mut rng, 5, 100);
        let p0 = select_indices(&past, &future, 0.0, &mut rng).unwrap();
        assert!(p0.past_selected.is_empty() && p0.future_selected.is_empty());
        let p1 = select_indices(&past, &future, 1.0, &mut rng).unwrap();
        assert_eq!(p1.past_selected, vec![0, 1, 2]);
        assert_eq!(p1.future_selected, vec![0, 1, 2, 3, 4]);
        let p = select_indices(&past, &future, 0.4, &mut rng).unwrap();
        assert_eq!(p.past_selected.len(), 1);
        assert_eq!(p.future_selected.len(), 2);
    }

    #[test]
    fn selection_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_session(&mut rng, 3, 0);
        let empty = Session::new(0, vec![]);
        assert!(select_indices(&empty, &s, 0.4, &mut rng).is_err());
        assert!(select_indices(&s, &empty, 0.4, &mut rng).is_err());
        assert!(select_indices(&s, &s, 1.5, &mut rng).is_err());
    }

    #[test]
    fn selection_is_deterministic_under_seed() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let past = random_session(&mut r, 8, 0);
        let future = random_session(&mut r, 6, 100);
        let a = select_indices(&past, &future, 0.4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = select_indices(&past, &future, 0.4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn worked_exchange() {
        // past [a@1, b@2, c@3], future [d@5, e@6], move b and d
        let past = Session::new(0, vec![ev(1, 1), ev(2, 2), ev(3, 3)]);
        let future = Session::new(0, vec![ev(4, 5), ev(5, 6)]);
        let plan = SelectionPlan {
            past_selected: vec![1],
            future_selected: vec![0],
            gamma: 0.4,
        };
        let (p, f) = exchange_and_sort(&past, &future, &plan).unwrap();
        assert_eq!(items(&p), vec![1, 3, 4]);
        assert_eq!(items(&f), vec![2, 5]);
        assert_eq!(p.events[2].timestamp, 5);
    }

    #[test]
    fn empty_plan_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let past = random_session(&mut rng, 4, 0);
        let future = random_session(&mut rng, 3, 50);
        let plan = SelectionPlan {
            past_selected: vec![],
            future_selected: vec![],
            gamma: 0.0,
        };
        let (p, f) = exchange_and_sort(&past, &future, &plan).unwrap();
        assert_eq!(p, past);
        assert_eq!(f, future);
    }

    #[test]
    fn invalid_plan_is_rejected() {
        let past = Session::new(0, vec![ev(1, 1)]);
        let future = Session::new(0, vec![ev(2, 2)]);
        let plan = SelectionPlan {
            past_selected: vec![1],
            future_selected: vec![],
            gamma: 1.0,
        };
        assert!(exchange_and_sort(&past, &future, &plan).is_err());
    }

    fn multiset(events: impl Iterator<Item = Event>) -> HashMap<(u32, i64), usize> {
        let mut m = HashMap::new();
        for e in events {
            *m.entry((e.item, e.timestamp)).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn exchange_conserves_items_and_sorts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (n_p, n_f) = (rng.gen_range(1..10), rng.gen_range(1..10));
            let past = random_session(&mut rng, n_p, 0);
            let future = random_session(&mut rng, n_f, 30);
            let gamma = rng.gen_range(0.0..=1.0);
            let plan = select_indices(&past, &future, gamma, &mut rng).unwrap();
            let (p, f) = exchange_and_sort(&past, &future, &plan).unwrap();
            let before = multiset(past.events.iter().chain(&future.events).copied());
            let after = multiset(p.events.iter().chain(&f.events).copied());
            assert_eq!(before, after);
            assert!(p.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            assert!(f.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            assert_eq!(p.len(), past.len() - plan.past_selected.len() + plan.future_selected.len());
        }
    }

    #[test]
    fn exchanging_the_moved_items_back_recovers_the_originals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            // distinct timestamps so positions are unambiguous
            let n_p = rng.gen_range(1..8);
            let n_f = rng.gen_range(1..8);
            let past = Session::new(0, (0..n_p).map(|i| ev(rng.gen_range(1..9), i as i64 * 2)).collect());
            let future = Session::new(0, (0..n_f).map(|i| ev(rng.gen_range(1..9), 1 + i as i64 * 2)).collect());
            let plan = select_indices(&past, &future, rng.gen_range(0.0..=1.0), &mut rng).unwrap();
            let (p, f) = exchange_and_sort(&past, &future, &plan).unwrap();
            let came_from = |s: &Session, e: &Event| s.events.iter().any(|x| x.timestamp == e.timestamp);
            let back = SelectionPlan {
                past_selected: (0..p.len()).filter(|&i| came_from(&future, &p.events[i])).collect(),
                future_selected: (0..f.len()).filter(|&i| came_from(&past, &f.events[i])).collect(),
                gamma: plan.gamma,
            };
            let (p2, f2) = exchange_and_sort(&p, &f, &back).unwrap();
            assert_eq!(p2.events, past.events);
            assert_eq!(f2.events, future.events);
        }
    }

    #[test]
    fn identical_multisets_keep_view_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let drawn: Vec<u32> = (0..n).map(|_| rng.gen_range(1..5)).collect();
            let past = Session::new(0, drawn.iter().enumerate().map(|(i, &x)| ev(x, i as i64)).collect());
            let mut shuffled = drawn.clone();
            shuffled.shuffle(&mut rng);
            let future = Session::new(0, shuffled.iter().enumerate().map(|(i, &x)| ev(x, 100 + i as i64)).collect());
            let plan = select_indices(&past, &future, rng.gen_range(0.0..=1.0), &mut rng).unwrap();
            let (p, f) = exchange_and_sort(&past, &future, &plan).unwrap();
            assert_eq!(p.len(), n);
            assert_eq!(f.len(), n);
        }
        // a single repeated item: both views keep exactly that multiset
        let past = Session::new(0, (0..4).map(|i| ev(7, i)).collect());
        let future = Session::new(0, (0..4).map(|i| ev(7, 10 + i)).collect());
        let plan = select_indices(&past, &future, 0.5, &mut rng).unwrap();
        let (p, f) = exchange_and_sort(&past, &future, &plan).unwrap();
        assert_eq!(items(&p), vec![7; 4]);
        assert_eq!(items(&f), vec![7; 4]);
    }

    #[test]
    fn crop_length_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Session::new(0, (0..10).map(|i| ev(i + 1, i as i64)).collect());
        for _ in 0..50 {
            let c = baseline_augment(&s, AugmentKind::Crop, 0.4, &mut rng).unwrap();
            assert_eq!(c.len(), 6);
            let first = c.events[0].item as usize - 1;
            assert_eq!(c.events, s.events[first..first + 6].to_vec());
        }
    }

    #[test]
    fn tiny_mask_ratio_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = Session::new(0, vec![ev(1, 0), ev(2, 1), ev(3, 2)]);
        assert_eq!(baseline_augment(&s, AugmentKind::Mask, 1e-9, &mut rng).unwrap(), s);
        let m = baseline_augment(&s, AugmentKind::Mask, 0.7, &mut rng).unwrap();
        assert_eq!(m.events.iter().filter(|e| e.item == MASK_ITEM).count(), 2);
    }

    #[test]
    fn reorder_preserves_multiset_and_outside_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let n = rng.gen_range(1..15);
            let s = Session::new(0, (0..n).map(|i| ev(rng.gen_range(1..50), i as i64)).collect());
            let ratio = rng.gen_range(0.05..0.95);
            let r = baseline_augment(&s, AugmentKind::Reorder, ratio, &mut rng).unwrap();
            let w = (ratio * n as f64).floor() as usize;
            let changed: Vec<usize> = (0..n).filter(|&i| r.events[i] != s.events[i]).collect();
            if let (Some(&lo), Some(&hi)) = (changed.first(), changed.last()) {
                assert!(hi - lo < w.max(1));
            }
            let mut a = items(&r);
            let mut b = items(&s);
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn baseline_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let empty = Session::new(0, vec![]);
        assert!(baseline_augment(&empty, AugmentKind::Crop, 0.4, &mut rng).is_err());
        let s = Session::new(0, vec![ev(1, 0)]);
        assert!(baseline_augment(&s, AugmentKind::Crop, 1.0, &mut rng).is_err());
        assert!(baseline_augment(&s, AugmentKind::Exchange, 0.4, &mut rng).is_err());
    }
}
