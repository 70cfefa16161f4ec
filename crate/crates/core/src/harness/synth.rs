use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{parse_key_values, parse_value};
use crate::data::{parse_events_str, Behavior, EventLog};
use crate::error::{Error, Result};

/// Parameters of the planted-interest event generator. Gaps are seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub sessions_per_user: usize,
    pub session_len_min: usize,
    pub session_len_max: usize,
    pub intra_gap_min: i64,
    pub intra_gap_max: i64,
    pub inter_gap_min: i64,
    pub inter_gap_max: i64,
    /// Probability that an event comes from the user's long-term category.
    pub long_pref_strength: f64,
    /// Probability that a new session picks a fresh intent category instead
    /// of keeping the previous one.
    pub intent_switch_prob: f64,
    /// Fraction of events replaced by uniformly random items.
    pub noise_rate: f64,
    /// Division threshold the gaps are checked against, in minutes.
    pub omega_minutes: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 500,
            n_categories: 20,
            sessions_per_user: 6,
            session_len_min: 4,
            session_len_max: 10,
            intra_gap_min: 10,
            intra_gap_max: 1800,
            inter_gap_min: 12 * 3600,
            inter_gap_max: 72 * 3600,
            long_pref_strength: 0.5,
            intent_switch_prob: 0.9,
            noise_rate: 0.0,
            omega_minutes: 360.0,
            seed: 7,
        }
    }
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (line, k, v) in parse_key_values(text)? {
            s.set(&k, &v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        s.validate()?;
        Ok(s)
    }
}

impl SyntheticSpec {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_users" => self.n_users = parse_value(key, v)?,
            "n_items" => self.n_items = parse_value(key, v)?,
            "n_categories" => self.n_categories = parse_value(key, v)?,
            "sessions_per_user" => self.sessions_per_user = parse_value(key, v)?,
            "session_len_min" => self.session_len_min = parse_value(key, v)?,
            "session_len_max" => self.session_len_max = parse_value(key, v)?,
            "intra_gap_min" => self.intra_gap_min = parse_value(key, v)?,
            "intra_gap_max" => self.intra_gap_max = parse_value(key, v)?,
            "inter_gap_min" => self.inter_gap_min = parse_value(key, v)?,
            "inter_gap_max" => self.inter_gap_max = parse_value(key, v)?,
            "long_pref_strength" => self.long_pref_strength = parse_value(key, v)?,
            "intent_switch_prob" => self.intent_switch_prob = parse_value(key, v)?,
            "noise_rate" => self.noise_rate = parse_value(key, v)?,
            "omega" | "omega_minutes" => self.omega_minutes = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("infeasible synthetic spec: {m}")));
        if self.n_categories < 2 {
            return bad("need at least 2 categories");
        }
        if self.n_items < self.n_categories {
            return bad("every category needs an item");
        }
        if self.n_users == 0 || self.sessions_per_user == 0 {
            return bad("need users and sessions");
        }
        if self.session_len_min == 0 || self.session_len_min > self.session_len_max {
            return bad("session length range is empty");
        }
        let omega = (self.omega_minutes * 60.0).round() as i64;
        if !(0 < self.intra_gap_min && self.intra_gap_min <= self.intra_gap_max && self.intra_gap_max < omega) {
            return bad("intra-session gaps must be positive and below omega");
        }
        if !(omega <= self.inter_gap_min && self.inter_gap_min <= self.inter_gap_max) {
            return bad("inter-session gaps must be at least omega");
        }
        for (k, p) in [
            ("long_pref_strength", self.long_pref_strength),
            ("intent_switch_prob", self.intent_switch_prob),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("`{k}` must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Category of synthetic item `i`.
pub fn synthetic_category(item: usize, n_categories: usize) -> usize {
    item % n_categories
}

fn draw_in_category<R: Rng>(rng: &mut R, cat: usize, spec: &SyntheticSpec) -> usize {
    let per = (spec.n_items - cat).div_ceil(spec.n_categories);
    cat + spec.n_categories * rng.gen_range(0..per)
}

fn behavior<R: Rng>(rng: &mut R, from_preference: bool) -> Behavior {
    // preference-driven events convert more often than intent-driven ones
    let (buy, cart, fav) = if from_preference { (0.15, 0.1, 0.1) } else { (0.03, 0.07, 0.07) };
    let u: f64 = rng.gen();
    if u < buy {
        Behavior::Purchase
    } else if u < buy + cart {
        Behavior::Cart
    } else if u < buy + cart + fav {
        Behavior::Favorite
    } else {
        Behavior::Click
    }
}

/// Generates a `user, item, category, behavior, timestamp` TSV.
///
/// Every user has a long-term category and each session an intent category;
/// an event draws from the former with probability `long_pref_strength` and
/// from the latter otherwise, then is replaced by a random item with
/// probability `noise_rate`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = String::new();
    for u in 0..spec.n_users {
        let pref = rng.gen_range(0..spec.n_categories);
        let mut intent = rng.gen_range(0..spec.n_categories);
        let mut t: i64 = 1_500_000_000 + rng.gen_range(0..30 * 86_400);
        for s in 0..spec.sessions_per_user {
            if s > 0 {
                t += rng.gen_range(spec.inter_gap_min..=spec.inter_gap_max);
                if rng.gen_bool(spec.intent_switch_prob) {
                    intent = rng.gen_range(0..spec.n_categories);
                }
            }
            let len = rng.gen_range(spec.session_len_min..=spec.session_len_max);
            for k in 0..len {
                if k > 0 {
                    t += rng.gen_range(spec.intra_gap_min..=spec.intra_gap_max);
                }
                let from_pref = rng.gen_bool(spec.long_pref_strength);
                let cat = if from_pref { pref } else { intent };
                let mut item = draw_in_category(&mut rng, cat, spec);
                let mut act = behavior(&mut rng, from_pref);
                if rng.gen_bool(spec.noise_rate) {
                    item = rng.gen_range(0..spec.n_items);
                    act = Behavior::Click;
                }
                let c = synthetic_category(item, spec.n_categories);
                let _ = writeln!(out, "u{u}\ti{item}\tc{c}\t{act}\t{t}");
            }
        }
    }
    Ok(out)
}

/// The generated TSV, parsed.
pub fn synthetic_log(spec: &SyntheticSpec) -> Result<EventLog> {
    parse_events_str(&generate_synthetic(spec)?, Path::new("<synthetic>"))
}
