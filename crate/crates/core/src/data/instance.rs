use super::event::Event;
use super::session::Session;

/// Window sizes used when expanding a user's sessions into instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpandParams {
    /// Number of recent events kept across session boundaries.
    pub recent: usize,
    /// Number of historical sessions kept.
    pub history: usize,
    /// Maximum events per session.
    pub session_len: usize,
}

/// One prediction target together with the context preceding it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub user: u32,
    /// Up to `history` complete sessions before the target's session, oldest first.
    pub historical: Vec<Session>,
    /// Events of the target's session before the target.
    pub past: Session,
    /// Events of the target's session after the target. Absent at evaluation
    /// time and when the target ends its session.
    pub future: Option<Session>,
    /// The latest events before the target, across session boundaries.
    pub recent: Vec<Event>,
    pub target: Event,
    pub label: u8,
    /// Index of the target's session among the user's sessions.
    pub session_index: usize,
}

impl TrainingInstance {
    /// Both sub-sessions are available, so the contrastive view can be built.
    pub fn has_contrastive_pair(&self) -> bool {
        !self.past.is_empty() && self.future.as_ref().is_some_and(|f| !f.is_empty())
    }

    /// Every historical event, oldest first, as one pseudo-session.
    pub fn flat_history(&self) -> Session {
        Session::new(0, self.historical.iter().flat_map(|s| s.events.iter().copied()).collect())
    }

    /// Checks the temporal invariants relative to the target. Returns a
    /// description of the first violation.
    pub fn check_invariants(&self, omega: i64) -> Result<(), String> {
        let t = self.target.timestamp;
        if let Some(e) = self.past.events.iter().chain(&self.recent).find(|e| e.timestamp >= t) {
            return Err(format!("context event at {} not before target at {t}", e.timestamp));
        }
        if let Some(f) = &self.future {
            if let Some(e) = f.events.iter().find(|e| e.timestamp <= t) {
                return Err(format!("future event at {} not after target at {t}", e.timestamp));
            }
            let mut prev = t;
            for e in &f.events {
                if e.timestamp - prev >= omega {
                    return Err("future event leaves the target's session".into());
                }
                prev = e.timestamp;
            }
        }
        let session_start = self.past.events.first().map_or(t, |e| e.timestamp);
        for h in &self.historical {
            if h.index >= self.session_index {
                return Err(format!("historical session {} not before {}", h.index, self.session_index));
            }
            if let Some(e) = h.events.iter().find(|e| e.timestamp >= session_start) {
                return Err(format!("historical event at {} overlaps current session", e.timestamp));
            }
        }
        Ok(())
    }
}

/// Emits one instance per event that has at least one earlier event.
///
/// The past sub-session is capped to the last `session_len` events before the
/// target and the future sub-session to the first `session_len` after it.
pub fn prefix_expand(sessions: &[Session], params: ExpandParams) -> Vec<TrainingInstance> {
    let flat: Vec<Event> = sessions.iter().flat_map(|s| s.events.iter().copied()).collect();
    let mut out = Vec::new();
    let mut global = 0usize;
    for (k, session) in sessions.iter().enumerate() {
        let first_hist = k.saturating_sub(params.history);
        let historical: Vec<Session> = sessions[first_hist..k]
            .iter()
            .map(|s| s.truncated(params.session_len))
            .collect();
        for (j, &target) in session.events.iter().enumerate() {
            let t = global;
            global += 1;
            if t == 0 {
                continue;
            }
            let past_start = j.saturating_sub(params.session_len);
            let past = Session::new(session.index, session.events[past_start..j].to_vec());
            let future_end = (j + 1 + params.session_len).min(session.events.len());
            let future_events = session.events[j + 1..future_end].to_vec();
            let future = (!future_events.is_empty()).then(|| Session::new(session.index, future_events));
            let recent = flat[t.saturating_sub(params.recent)..t].to_vec();
            out.push(TrainingInstance {
                user: target.user,
                historical: historical.clone(),
                past,
                future,
                recent,
                target,
                label: 1,
                session_index: k,
            });
        }
    }
    out
}
