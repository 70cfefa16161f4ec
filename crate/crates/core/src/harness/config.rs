use std::path::Path;
use std::str::FromStr;

use crate::augmentation::AugmentKind;
use crate::data::ExpandParams;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{LossConfig, Similarity, SslDenominator, Variant};

/// Splits `key = value` text into pairs. `#` starts a comment; blank lines
/// are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((n + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Every knob of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub batch: usize,
    pub max_seq_len: usize,
    /// Historical sessions kept.
    pub b: usize,
    /// Events kept per session.
    pub l: usize,
    /// Recent events kept.
    pub r: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub omega_minutes: f64,
    /// Items scored per training instance: the positive and `n_scored - 1` negatives.
    pub n_scored: usize,
    pub eval_negatives: usize,
    pub eval_batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub ssl_denominator: SslDenominator,
    pub ssl_similarity: Similarity,
    pub augmentation: AugmentKind,
    pub noise_rate: f64,
    pub init_scale: f64,
    pub positions: bool,
    pub categories: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dim: 40,
            heads: 2,
            ffn_mult: 4,
            batch: 500,
            max_seq_len: 50,
            b: 5,
            l: 10,
            r: 30,
            gamma: 0.4,
            lambda: 0.1,
            beta: 0.1,
            tau: 0.2,
            omega_minutes: 360.0,
            n_scored: 5,
            eval_negatives: 49,
            eval_batch: 128,
            lr: 1e-3,
            patience: 5,
            max_epochs: 50,
            seed: 42,
            variant: Variant::Full,
            ssl_denominator: SslDenominator::Standard,
            ssl_similarity: Similarity::Dot,
            augmentation: AugmentKind::Exchange,
            noise_rate: 0.0,
            init_scale: 0.01,
            positions: true,
            categories: true,
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    /// Starts from the defaults and applies every line.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_key_values(text)? {
            cfg.set(&k, &v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dim" | "d" => self.dim = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "ffn_mult" => self.ffn_mult = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_value(key, v)?,
            "b" => self.b = parse_value(key, v)?,
            "l" => self.l = parse_value(key, v)?,
            "r" => self.r = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "beta" => self.beta = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "omega" | "omega_minutes" => self.omega_minutes = parse_value(key, v)?,
            "n_scored" => self.n_scored = parse_value(key, v)?,
            "eval_negatives" => self.eval_negatives = parse_value(key, v)?,
            "eval_batch" => self.eval_batch = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "max_epochs" => self.max_epochs = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "variant" => self.variant = v.parse()?,
            "ssl_denominator" => self.ssl_denominator = v.parse()?,
            "ssl_similarity" => self.ssl_similarity = v.parse()?,
            "augmentation" => self.augmentation = v.parse()?,
            "noise_rate" => self.noise_rate = parse_value(key, v)?,
            "init_scale" => self.init_scale = parse_value(key, v)?,
            "positions" => self.positions = parse_value(key, v)?,
            "categories" => self.categories = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, then validates.
    pub fn with_overrides(mut self, pairs: &[String]) -> Result<Self> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{p}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("batch", self.batch.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("b", self.b.to_string()),
            ("l", self.l.to_string()),
            ("r", self.r.to_string()),
            ("gamma", format!("{:?}", self.gamma)),
            ("lambda", format!("{:?}", self.lambda)),
            ("beta", format!("{:?}", self.beta)),
            ("tau", format!("{:?}", self.tau)),
            ("omega_minutes", format!("{:?}", self.omega_minutes)),
            ("n_scored", self.n_scored.to_string()),
            ("eval_negatives", self.eval_negatives.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("patience", self.patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("variant", self.variant.slug().to_string()),
            ("ssl_denominator", self.ssl_denominator.to_string()),
            ("ssl_similarity", self.ssl_similarity.to_string()),
            ("augmentation", self.augmentation.to_string()),
            ("noise_rate", format!("{:?}", self.noise_rate)),
            ("init_scale", format!("{:?}", self.init_scale)),
            ("positions", self.positions.to_string()),
            ("categories", self.categories.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch", self.batch),
            ("max_seq_len", self.max_seq_len),
            ("b", self.b),
            ("l", self.l),
            ("r", self.r),
            ("eval_negatives", self.eval_negatives),
            ("eval_batch", self.eval_batch),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if self.n_scored < 2 {
            return Err(Error::Config("`n_scored` must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config("`gamma` and `noise_rate` must lie in [0, 1]".into()));
        }
        if self.augmentation != AugmentKind::Exchange && !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("baseline augmentations need `gamma` in (0, 1)".into()));
        }
        let finite_pos = [("tau", self.tau), ("lr", self.lr), ("omega_minutes", self.omega_minutes), ("init_scale", self.init_scale)];
        if let Some((k, _)) = finite_pos.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("`lambda` and `beta` must be non-negative".into()));
        }
        if self.omega_seconds() < 1 {
            return Err(Error::Config("`omega_minutes` is below one second".into()));
        }
        self.encoder_config().validate()
    }

    pub fn omega_seconds(&self) -> i64 {
        (self.omega_minutes * 60.0).round() as i64
    }

    pub fn expand_params(&self) -> ExpandParams {
        ExpandParams {
            recent: self.r,
            history: self.b,
            session_len: self.l,
        }
    }

    /// Positions cover the flat history of the no-division variant and an
    /// exchanged view, which can hold up to two sub-sessions' worth of events.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            positions: self.positions,
            max_positions: (self.b * self.l).max(2 * self.l),
            init_scale: self.init_scale,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            beta: self.beta,
            tau: self.tau,
            denominator: self.ssl_denominator,
            similarity: self.ssl_similarity,
        }
    }
}
