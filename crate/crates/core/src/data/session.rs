use super::event::Event;
use crate::error::{Error, Result};

/// A maximal run of events whose consecutive gaps are below the division
/// threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    /// Position among the user's sessions, starting at 0.
    pub index: usize,
    pub events: Vec<Event>,
}

impl Session {
    pub fn new(index: usize, events: Vec<Event>) -> Self {
        Self { index, events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn items(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.item).collect()
    }

    /// The most recent `l` events.
    pub fn truncated(&self, l: usize) -> Session {
        let skip = self.events.len().saturating_sub(l);
        Session::new(self.index, self.events[skip..].to_vec())
    }
}

/// Splits time-ordered `events` wherever the gap to the previous event is at
/// least `omega` seconds. A gap of exactly `omega` starts a new session.
///
/// Sessions are returned untruncated so that their concatenation is `events`.
pub fn sess_div(events: &[Event], omega: i64) -> Result<Vec<Session>> {
    if omega <= 0 {
        return Err(Error::Invalid(format!("division threshold must be positive, got {omega}")));
    }
    let mut sessions: Vec<Session> = Vec::new();
    let mut prev: Option<i64> = None;
    for e in events {
        match prev {
            Some(p) if e.timestamp - p < omega => {
                sessions.last_mut().expect("open session").events.push(*e);
            }
            _ => {
                let index = sessions.len();
                sessions.push(Session::new(index, vec![*e]));
            }
        }
        prev = Some(e.timestamp);
    }
    Ok(sessions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::event::Behavior;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(t: i64) -> Event {
        Event {
            user: 0,
            item: 1 + t as u32 % 7,
            category: 0,
            behavior: Behavior::Click,
            timestamp: t,
        }
    }

    fn times(sessions: &[Session]) -> Vec<Vec<i64>> {
        sessions
            .iter()
            .map(|s| s.events.iter().map(|e| e.timestamp).collect())
            .collect()
    }

    #[test]
    fn splits_on_threshold() {
        let events: Vec<Event> = [0, 10, 400, 405].iter().map(|&m| ev(m * 60)).collect();
        let s = sess_div(&events, 360 * 60).unwrap();
        assert_eq!(times(&s), vec![vec![0, 600], vec![24_000, 24_300]]);
        assert_eq!(s[1].index, 1);
    }

    #[test]
    fn gap_equal_to_threshold_splits() {
        let events = vec![ev(0), ev(100), ev(199)];
        let s = sess_div(&events, 100).unwrap();
        assert_eq!(times(&s), vec![vec![0], vec![100, 199]]);
    }

    #[test]
    fn single_event_and_empty_input() {
        assert_eq!(sess_div(&[ev(3)], 10).unwrap().len(), 1);
        assert!(sess_div(&[], 10).unwrap().is_empty());
        assert!(sess_div(&[ev(3)], 0).is_err());
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let s = Session::new(2, (0..6).map(ev).collect());
        let t = s.truncated(4);
        assert_eq!(t.events.iter().map(|e| e.timestamp).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        assert_eq!(t.index, 2);
        assert_eq!(s.truncated(10), s);
    }

    // Independent oracle: mark boundaries first, then cut.
    fn oracle(events: &[Event], omega: i64) -> Vec<Vec<i64>> {
        let starts: Vec<usize> = (0..events.len())
            .filter(|&i| i == 0 || events[i].timestamp - events[i - 1].timestamp >= omega)
            .collect();
        let mut out = Vec::new();
        for (k, &s) in starts.iter().enumerate() {
            let e = starts.get(k + 1).copied().unwrap_or(events.len());
            out.push(events[s..e].iter().map(|x| x.timestamp).collect());
        }
        out
    }

    #[test]
    fn matches_linear_scan_oracle_on_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.gen_range(1..60);
            let mut t = 0i64;
            let events: Vec<Event> = (0..n)
                .map(|_| {
                    t += rng.gen_range(0..5000);
                    ev(t)
                })
                .collect();
            let omega = rng.gen_range(1..4000);
            assert_eq!(times(&sess_div(&events, omega).unwrap()), oracle(&events, omega));
        }
    }

    proptest! {
        #[test]
        fn partition_reproduces_input(gaps in proptest::collection::vec(0i64..1000, 0..80), omega in 1i64..900) {
            let mut t = 0;
            let events: Vec<Event> = gaps.iter().map(|g| { t += g; ev(t) }).collect();
            let sessions = sess_div(&events, omega).unwrap();
            let flat: Vec<Event> = sessions.iter().flat_map(|s| s.events.clone()).collect();
            prop_assert_eq!(flat, events);
            for s in &sessions {
                prop_assert!(s.events.windows(2).all(|w| w[1].timestamp - w[0].timestamp < omega));
            }
        }

        #[test]
        fn larger_threshold_never_adds_sessions(gaps in proptest::collection::vec(0i64..1000, 1..80), a in 1i64..900, b in 1i64..900) {
            let mut t = 0;
            let events: Vec<Event> = gaps.iter().map(|g| { t += g; ev(t) }).collect();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(sess_div(&events, hi).unwrap().len() <= sess_div(&events, lo).unwrap().len());
        }
    }
}
