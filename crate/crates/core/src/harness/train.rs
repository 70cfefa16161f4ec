use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::dataset::Dataset;
use crate::data::{sample_in_batch_negatives, TrainingInstance};
use crate::error::{Error, Result};
use crate::evaluation::{sample_candidates, score_pools, EvalReport};
use crate::model::{prepare_training_batch, Lsidn, ModelConfig, ViewSpec};
use crate::numerics::{Adam, Checkpoint, Graph, ParamStore};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Negatives = 3,
    Augment = 4,
    ValPools = 5,
    TestPools = 6,
    Noise = 7,
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Freshly initialized parameters for `cfg` over `data`'s vocabulary.
pub fn build_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<(ParamStore, Lsidn)> {
    let mut store = ParamStore::new();
    let mc = ModelConfig {
        encoder: cfg.encoder_config(),
        item_rows: data.vocab.num_item_rows(),
        category_rows: cfg.categories.then(|| data.vocab.num_categories() + 1),
    };
    let model = Lsidn::new(&mut store, mc, &mut stream(cfg.seed, Stream::Init))?;
    Ok((store, model))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub variant: String,
    pub seed: u64,
    pub batches: usize,
    pub loss: f64,
    pub main: f64,
    pub ssl: Option<f64>,
    pub reg: f64,
    pub val_auc: f64,
    pub val_gauc: f64,
    pub improved: bool,
}

pub struct TrainOutcome {
    pub model: Lsidn,
    /// Parameters of the best validation epoch.
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(self.store.clone());
        for (k, v) in cfg.to_pairs() {
            ck.meta.push((format!("config.{k}"), v));
        }
        ck.meta.push(("best_epoch".into(), self.best_epoch.to_string()));
        ck.meta.push(("item_rows".into(), self.model.config.item_rows.to_string()));
        ck
    }
}

/// Rebuilds the config stored in a checkpoint's metadata.
pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in &ck.meta {
        if let Some(key) = k.strip_prefix("config.") {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Model structure for `cfg` with the checkpoint's parameter values.
pub fn restore_model(ck: &Checkpoint, data: &Dataset) -> Result<(ExperimentConfig, ParamStore, Lsidn)> {
    let cfg = config_from_checkpoint(ck)?;
    let (mut store, model) = build_model(&cfg, data)?;
    if let Some(rows) = ck.meta("item_rows") {
        if rows != model.config.item_rows.to_string() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {rows} item rows but the data has {}",
                model.config.item_rows
            )));
        }
    }
    store.load_from(&ck.params)?;
    Ok((cfg, store, model))
}

/// Evaluates parameters on sampled pools of `instances`; pools depend only on
/// the seed and the data.
pub fn evaluate_split(
    cfg: &ExperimentConfig,
    model: &Lsidn,
    store: &ParamStore,
    data: &Dataset,
    instances: &[TrainingInstance],
    pools: Stream,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Empty("evaluation split has no instances".into()));
    }
    let cands = sample_candidates(instances, &data.interacted, &data.vocab, cfg.eval_negatives, &mut stream(cfg.seed, pools))?;
    let (p, _) = score_pools(model, store, cfg.variant, instances, &cands, &data.vocab, cfg.eval_batch)?;
    EvalReport::from_pools(&p)
}

/// Mini-batch Adam over the training split with early stopping on
/// validation AUC. Returns the parameters of the best epoch.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    let (mut store, model) = build_model(cfg, data)?;
    let loss_cfg = cfg.loss_config();
    let mut adam = Adam::new(cfg.lr);
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut negatives = stream(cfg.seed, Stream::Negatives);
    let mut augment = stream(cfg.seed, Stream::Augment);
    let val_cands = sample_candidates(
        &data.val,
        &data.interacted,
        &data.vocab,
        cfg.eval_negatives,
        &mut stream(cfg.seed, Stream::ValPools),
    )?;
    let spec = ViewSpec {
        kind: cfg.augmentation,
        ratio: cfg.gamma,
    };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0usize, store.clone());
    let mut stale = 0;
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut ssl_batches = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let owned: Vec<TrainingInstance> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let targets = match sample_in_batch_negatives(&owned, cfg.n_scored, &mut negatives) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("epoch {epoch}: skipping batch: {e}");
                    continue;
                }
            };
            let refs: Vec<&TrainingInstance> = owned.iter().collect();
            let batch = prepare_training_batch(&refs, &targets, &data.vocab, cfg.variant, Some((spec, &mut augment)))?;
            let mut grads = {
                let mut g = Graph::new(&store);
                let (loss, bundle, _) = model.batch_loss(&mut g, &batch, cfg.variant, &loss_cfg)?;
                if !bundle.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, batch {batches}: main {} ssl {:?} reg {}",
                        bundle.main, bundle.ssl, bundle.reg
                    )));
                }
                sums.0 += bundle.total;
                sums.1 += bundle.main;
                if let Some(s) = bundle.ssl {
                    sums.2 += s;
                    ssl_batches += 1;
                }
                sums.3 += bundle.reg;
                g.backward(loss)?
            };
            adam.step(&mut store, &mut grads)?;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Invalid("no training batch had two distinct targets".into()));
        }
        let val = {
            let (pools, _) = score_pools(&model, &store, cfg.variant, &data.val, &val_cands, &data.vocab, cfg.eval_batch)?;
            EvalReport::from_pools(&pools)?
        };
        let improved = val.auc > best.0;
        if improved {
            best = (val.auc, epoch, store.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        let n = batches as f64;
        let row = EpochLog {
            epoch,
            variant: cfg.variant.slug().to_string(),
            seed: cfg.seed,
            batches,
            loss: sums.0 / n,
            main: sums.1 / n,
            ssl: (ssl_batches > 0).then(|| sums.2 / ssl_batches as f64),
            reg: sums.3 / n,
            val_auc: val.auc,
            val_gauc: val.gauc,
            improved,
        };
        log::info!(
            "{} seed {} epoch {epoch}: loss {:.5} val auc {:.4}",
            row.variant,
            row.seed,
            row.loss,
            row.val_auc
        );
        log.push(row);
        if stale >= cfg.patience {
            break;
        }
    }
    let (best_val_auc, best_epoch, store) = best;
    Ok(TrainOutcome {
        model,
        store,
        log,
        best_epoch,
        best_val_auc,
    })
}
