use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::dataset::{build_dataset, inject_noise, Dataset};
use super::train::{evaluate_split, stream, train, Stream};
use crate::augmentation::AugmentKind;
use crate::data::EventLog;
use crate::error::{Error, Result};
use crate::evaluation::{drop_rate, EvalReport};
use crate::model::Variant;

/// Test metrics of one trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: String,
    pub augmentation: String,
    pub seed: u64,
    pub noise_rate: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub val_auc: f64,
    pub auc: f64,
    pub gauc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl RunResult {
    fn new(cfg: &ExperimentConfig, best_epoch: usize, epochs: usize, val_auc: f64, t: &EvalReport) -> Self {
        Self {
            variant: cfg.variant.slug().to_string(),
            augmentation: cfg.augmentation.to_string(),
            seed: cfg.seed,
            noise_rate: cfg.noise_rate,
            best_epoch,
            epochs,
            val_auc,
            auc: t.auc,
            gauc: t.gauc,
            mrr: t.mrr,
            ndcg5: t.ndcg5,
            ndcg10: t.ndcg10,
        }
    }
}

/// Contaminates the training and validation splits with `cfg.noise_rate`
/// adversarial instances; the test split is left as is.
pub fn with_noise(cfg: &ExperimentConfig, data: &Dataset) -> Result<Dataset> {
    if cfg.noise_rate == 0.0 {
        return Ok(data.clone());
    }
    let mut rng = stream(cfg.seed, Stream::Noise);
    let mut out = data.clone();
    out.train = inject_noise(&data.train, &data.interacted, &data.vocab, cfg.noise_rate, &mut rng)?;
    out.val = inject_noise(&data.val, &data.interacted, &data.vocab, cfg.noise_rate, &mut rng)?;
    Ok(out)
}

/// Trains on `data` (after noise injection) and reports test metrics.
pub fn train_and_test(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunResult> {
    let noisy = with_noise(cfg, data)?;
    let out = train(cfg, &noisy)?;
    let test = evaluate_split(cfg, &out.model, &out.store, data, &data.test, Stream::TestPools)?;
    Ok(RunResult::new(cfg, out.best_epoch, out.log.len(), out.best_val_auc, &test))
}

/// Every variant trained and tested from the same seed.
pub fn run_ablation(cfg: &ExperimentConfig, log: &EventLog) -> Result<Vec<RunResult>> {
    let data = build_dataset(log, cfg)?;
    Variant::ALL
        .iter()
        .map(|&v| {
            let c = ExperimentConfig { variant: v, ..cfg.clone() };
            train_and_test(&c, &data)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    /// `variant` or `augmentation`.
    pub group: String,
    pub name: String,
    pub variant: String,
    pub augmentation: String,
    pub seed: u64,
    pub noise_rate: f64,
    pub auc: f64,
    pub gauc: f64,
    pub auc_drop: f64,
    pub gauc_drop: f64,
}

/// Trains the given variants (with the configured augmentation) and the full
/// model under each augmentation at every noise rate. Drop rates are
/// relative to the rate-0 run of the same row.
pub fn run_robustness(
    cfg: &ExperimentConfig,
    log: &EventLog,
    rates: &[f64],
    variants: &[Variant],
    augmentations: &[AugmentKind],
) -> Result<Vec<RobustnessRow>> {
    if !rates.contains(&0.0) {
        return Err(Error::Config("robustness rates must include 0".into()));
    }
    let data = build_dataset(log, cfg)?;
    let mut settings: Vec<(&str, String, Variant, AugmentKind)> = variants
        .iter()
        .map(|&v| ("variant", v.slug().to_string(), v, cfg.augmentation))
        .collect();
    settings.extend(
        augmentations
            .iter()
            .map(|&a| ("augmentation", a.to_string(), Variant::Full, a)),
    );
    // identical settings are trained once
    let mut cache: Vec<((Variant, AugmentKind, u64), RunResult)> = Vec::new();
    let mut run = |v: Variant, a: AugmentKind, rate: f64| -> Result<RunResult> {
        let key = (v, a, rate.to_bits());
        if let Some((_, r)) = cache.iter().find(|(k, _)| *k == key) {
            return Ok(r.clone());
        }
        let c = ExperimentConfig {
            variant: v,
            augmentation: a,
            noise_rate: rate,
            ..cfg.clone()
        };
        let r = train_and_test(&c, &data)?;
        cache.push((key, r.clone()));
        Ok(r)
    };
    let mut rows = Vec::new();
    for (group, name, v, a) in settings {
        let clean = run(v, a, 0.0)?;
        for &rate in rates {
            let r = run(v, a, rate)?;
            rows.push(RobustnessRow {
                group: group.to_string(),
                name: name.clone(),
                variant: v.slug().to_string(),
                augmentation: a.to_string(),
                seed: cfg.seed,
                noise_rate: rate,
                auc: r.auc,
                gauc: r.gauc,
                auc_drop: drop_rate(clean.auc, r.auc),
                gauc_drop: drop_rate(clean.gauc, r.gauc),
            });
        }
    }
    Ok(rows)
}

/// Hyperparameters the sweep runner can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Tau,
    Lambda,
    Omega,
}

impl SweepParam {
    pub const ALL: [SweepParam; 3] = [SweepParam::Tau, SweepParam::Lambda, SweepParam::Omega];

    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Lambda => "lambda",
            SweepParam::Omega => "omega",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| Error::Config(format!("cannot sweep `{s}`; expected tau, lambda or omega")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub variant: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub auc: f64,
    pub gauc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

/// One train/test run per value, everything else fixed at `cfg`. Omega
/// values re-divide the sessions.
pub fn run_sweep(cfg: &ExperimentConfig, log: &EventLog, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep needs at least one value".into()));
    }
    let base = build_dataset(log, cfg)?;
    values
        .iter()
        .map(|&value| {
            let mut c = cfg.clone();
            c.set(param.key(), &value.to_string())?;
            c.validate()?;
            let r = if param == SweepParam::Omega {
                train_and_test(&c, &build_dataset(log, &c)?)?
            } else {
                train_and_test(&c, &base)?
            };
            Ok(SweepRow {
                param: param.to_string(),
                value,
                variant: r.variant,
                seed: r.seed,
                best_epoch: r.best_epoch,
                auc: r.auc,
                gauc: r.gauc,
                mrr: r.mrr,
                ndcg5: r.ndcg5,
                ndcg10: r.ndcg10,
            })
        })
        .collect()
}
