use super::*;
use crate::augmentation::AugmentKind;
use crate::data::EventLog;
use crate::model::Variant;

fn tiny_log(seed: u64) -> EventLog {
    synthetic_log(&SyntheticSpec {
        n_users: 50,
        n_items: 200,
        n_categories: 10,
        sessions_per_user: 5,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn tiny_cfg() -> ExperimentConfig {
    ExperimentConfig {
        dim: 8,
        batch: 32,
        b: 3,
        l: 6,
        r: 8,
        lr: 0.005,
        beta: 0.0,
        max_epochs: 2,
        eval_negatives: 20,
        ..ExperimentConfig::default()
    }
}

#[test]
fn one_epoch_smoke_run_emits_checkpoint_and_log() {
    let log = tiny_log(1);
    let cfg = ExperimentConfig {
        max_epochs: 1,
        ..tiny_cfg()
    };
    let data = build_dataset(&log, &cfg).unwrap();
    let out = train(&cfg, &data).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.best_epoch, 1);
    let row = &out.log[0];
    assert!(row.loss.is_finite() && row.ssl.is_some() && row.batches > 0);
    let ck = out.checkpoint(&cfg);
    let back = crate::numerics::Checkpoint::from_text(&ck.to_text()).unwrap();
    let (cfg2, store, _) = restore_model(&back, &data).unwrap();
    assert_eq!(cfg2, cfg);
    for (id, p) in out.store.iter() {
        assert_eq!(store.value(id).data(), p.value.data());
    }
}

#[test]
fn zero_lambda_matches_the_no_contrastive_variant_exactly() {
    let log = tiny_log(2);
    let a = ExperimentConfig {
        lambda: 0.0,
        ..tiny_cfg()
    };
    let b = ExperimentConfig {
        variant: Variant::NoSd,
        ..tiny_cfg()
    };
    let data = build_dataset(&log, &a).unwrap();
    let ra = train(&a, &data).unwrap();
    let rb = train(&b, &data).unwrap();
    assert!(ra.log.iter().all(|r| r.ssl.is_some()));
    assert!(rb.log.iter().all(|r| r.ssl.is_none()));
    for (x, y) in ra.log.iter().zip(&rb.log) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        assert_eq!(x.val_auc.to_bits(), y.val_auc.to_bits());
    }
    for ((_, p), (_, q)) in ra.store.iter().zip(rb.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn second_epoch_loss_does_not_exceed_the_first() {
    let log = tiny_log(3);
    let mut verdicts = Vec::new();
    for seed in [1, 2, 3] {
        let cfg = ExperimentConfig {
            seed,
            lr: 0.002,
            patience: 10,
            ..tiny_cfg()
        };
        let data = build_dataset(&log, &cfg).unwrap();
        let out = train(&cfg, &data).unwrap();
        verdicts.push(out.log[1].loss - out.log[0].loss);
    }
    verdicts.sort_by(f64::total_cmp);
    assert!(verdicts[1] <= 0.0, "{verdicts:?}");
}

#[test]
fn training_rejects_empty_splits() {
    let log = tiny_log(4);
    let cfg = tiny_cfg();
    let mut data = build_dataset(&log, &cfg).unwrap();
    data.val.clear();
    assert!(train(&cfg, &data).is_err());
}

#[test]
fn ablation_covers_every_variant() {
    let log = tiny_log(5);
    let cfg = ExperimentConfig {
        max_epochs: 1,
        ..tiny_cfg()
    };
    let rows = run_ablation(&cfg, &log).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full", "wo-ld", "wo-sd", "wo-ri", "wo-ci", "wo-li", "wo-si"]);
}

#[test]
fn robustness_rows_and_drop_rates() {
    let log = tiny_log(6);
    let cfg = ExperimentConfig {
        max_epochs: 1,
        ..tiny_cfg()
    };
    let rows = run_robustness(&cfg, &log, &[0.0, 0.2], &[Variant::Full, Variant::NoSd], &AugmentKind::ALL).unwrap();
    assert_eq!(rows.len(), 12);
    for r in rows.iter().filter(|r| r.noise_rate == 0.0) {
        assert_eq!(r.auc_drop, 0.0);
    }
    let augs: Vec<&str> = rows
        .iter()
        .filter(|r| r.group == "augmentation" && r.noise_rate == 0.0)
        .map(|r| r.name.as_str())
        .collect();
    assert_eq!(augs, ["exchange", "crop", "mask", "reorder"]);
    // the exchange row is the full model's run
    let full: Vec<f64> = rows.iter().filter(|r| r.name == "full").map(|r| r.auc).collect();
    let exch: Vec<f64> = rows.iter().filter(|r| r.name == "exchange").map(|r| r.auc).collect();
    assert_eq!(full, exch);
    for r in &rows {
        let clean = rows
            .iter()
            .find(|c| c.name == r.name && c.noise_rate == 0.0)
            .unwrap();
        assert!((r.auc_drop - (clean.auc - r.auc) / clean.auc).abs() < 1e-15);
    }
    assert!(run_robustness(&cfg, &log, &[0.1], &[Variant::Full], &[]).is_err());
}

#[test]
fn sweeps_follow_the_value_order_and_reproduce() {
    let log = tiny_log(7);
    let cfg = ExperimentConfig {
        max_epochs: 1,
        ..tiny_cfg()
    };
    let rows = run_sweep(&cfg, &log, SweepParam::Tau, &[0.1, 0.2, 0.4]).unwrap();
    assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), [0.1, 0.2, 0.4]);
    assert!(rows.iter().all(|r| r.param == "tau"));
    let again = run_sweep(&cfg, &log, SweepParam::Tau, &[0.1, 0.2, 0.4]).unwrap();
    assert_eq!(rows, again);

    let single = run_sweep(&cfg, &log, SweepParam::Lambda, &[0.3]).unwrap();
    let plain = train_and_test(
        &ExperimentConfig {
            lambda: 0.3,
            ..cfg.clone()
        },
        &build_dataset(&log, &cfg).unwrap(),
    )
    .unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].auc, plain.auc);
    assert_eq!(single[0].ndcg10, plain.ndcg10);

    let omega = run_sweep(&cfg, &log, SweepParam::Omega, &[60.0, 360.0]).unwrap();
    assert_eq!(omega.len(), 2);
    assert!(run_sweep(&cfg, &log, SweepParam::Tau, &[]).is_err());
    assert!("beta".parse::<SweepParam>().is_err());
}

#[test]
fn noise_leaves_the_test_split_alone() {
    let log = tiny_log(8);
    let cfg = ExperimentConfig {
        noise_rate: 0.3,
        ..tiny_cfg()
    };
    let data = build_dataset(&log, &cfg).unwrap();
    let noisy = with_noise(&cfg, &data).unwrap();
    assert_eq!(noisy.test, data.test);
    assert_eq!(noisy.train.len(), data.train.len() + (0.3 * data.train.len() as f64).floor() as usize);
    assert_eq!(noisy.val.len(), data.val.len() + (0.3 * data.val.len() as f64).floor() as usize);
    let test_targets: std::collections::HashSet<(u32, i64)> =
        data.test.iter().map(|i| (i.user, i.target.timestamp)).collect();
    for inst in &noisy.train {
        assert!(!test_targets.contains(&(inst.user, inst.target.timestamp)));
    }
}
