//! `lsidn` command-line interface.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use super::{
    build_dataset, evaluate_split, restore_model, run_ablation, run_robustness, run_sweep, train, write_csv,
    write_jsonl, ExperimentConfig, Stream, SweepParam, SyntheticSpec,
};
use crate::augmentation::AugmentKind;
use crate::data::{parse_events, sess_div, EventLog};
use crate::evaluation::{alpha_split_analysis, MetricRecord};
use crate::model::Variant;
use crate::numerics::Checkpoint;

#[derive(Debug, Parser)]
#[command(name = "lsidn", version, about = "Long- and short-term interest denoising network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic event log.
    Synth {
        /// `key = value` spec file; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Spec overrides, `key=value`.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Normalize an event log and write its session division.
    Preprocess {
        #[arg(long)]
        events: PathBuf,
        /// Division threshold in minutes.
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and write a checkpoint, log and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `test` or `val`.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        multi: Multi,
    },
    /// Train under injected noise and report drop rates.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        multi: Multi,
        #[arg(long, default_value = "0,0.1,0.2,0.3")]
        rates: String,
        #[arg(long, default_value = "full,wo-sd")]
        variants: String,
        #[arg(long, default_value = "exchange,crop,mask,reorder")]
        augmentations: String,
    },
    /// Train and test once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        multi: Multi,
        /// `tau`, `lambda` or `omega` (minutes).
        #[arg(long)]
        param: String,
        #[arg(long)]
        values: String,
    },
    /// Mean fusion gate per target behavior type.
    AnalyzeAlpha {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// `key = value` config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Event TSV, or a directory holding `events.tsv`.
    #[arg(long)]
    data: PathBuf,
    /// Config overrides, `key=value`.
    #[arg(long = "set")]
    set: Vec<String>,
}

#[derive(Debug, clap::Args)]
pub struct Multi {
    /// Comma-separated seeds; the config seed when omitted.
    #[arg(long)]
    seeds: Option<String>,
    /// Directory for JSON-lines and CSV reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_list<T: FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| anyhow::anyhow!("bad list entry `{x}`: {e}")))
        .collect()
}

fn events_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("events.tsv")
    } else {
        data.to_path_buf()
    }
}

fn load_log(data: &Path) -> anyhow::Result<EventLog> {
    let p = events_path(data);
    parse_events(&p).with_context(|| format!("reading events from {}", p.display()))
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(base.with_overrides(&self.set)?)
    }
}

impl Multi {
    fn seeds(&self, cfg: &ExperimentConfig) -> anyhow::Result<Vec<u64>> {
        match &self.seeds {
            Some(s) => parse_list(s),
            None => Ok(vec![cfg.seed]),
        }
    }
}

fn emit<T: Serialize>(rows: &[T], out: Option<&Path>, stem: &str) -> anyhow::Result<()> {
    print!("{}", super::to_jsonl(rows)?);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(format!("{stem}.jsonl")), rows)?;
        write_csv(&dir.join(format!("{stem}.csv")), rows)?;
    }
    Ok(())
}

fn split_stream(split: &str) -> anyhow::Result<Stream> {
    match split {
        "test" => Ok(Stream::TestPools),
        "val" => Ok(Stream::ValPools),
        other => bail!("unknown split `{other}`; expected test or val"),
    }
}

#[derive(Serialize)]
struct SessionRow {
    user: String,
    session: usize,
    start: i64,
    end: i64,
    events: usize,
}

#[derive(Serialize)]
struct Summary {
    users: usize,
    items: usize,
    categories: usize,
    events: usize,
    sessions: usize,
    omega_minutes: f64,
}

#[derive(Serialize)]
struct AlphaRow {
    behavior: String,
    mean_alpha: f64,
    count: usize,
    variant: String,
    seed: u64,
    split: String,
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { spec, out, set } => {
            let mut s = match spec {
                Some(p) => SyntheticSpec::load(&p)?,
                None => SyntheticSpec::default(),
            };
            for kv in &set {
                let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not key=value"))?;
                s.set(k.trim(), v.trim())?;
            }
            let text = super::generate_synthetic(&s)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, text)?;
        }
        Command::Preprocess { events, omega, out } => {
            if !(omega > 0.0) {
                bail!("omega must be positive");
            }
            let log = parse_events(&events)?;
            std::fs::create_dir_all(&out)?;
            let mut tsv = Vec::new();
            log.write_tsv(&mut tsv)?;
            std::fs::write(out.join("events.tsv"), tsv)?;
            let omega_s = (omega * 60.0).round() as i64;
            let mut rows = Vec::new();
            for seq in &log.sequences {
                for s in sess_div(&seq.events, omega_s)? {
                    rows.push(SessionRow {
                        user: log.vocab.user_name(seq.user).to_string(),
                        session: s.index,
                        start: s.events[0].timestamp,
                        end: s.events[s.len() - 1].timestamp,
                        events: s.len(),
                    });
                }
            }
            write_csv(&out.join("sessions.csv"), &rows)?;
            let summary = Summary {
                users: log.vocab.num_users(),
                items: log.vocab.num_items(),
                categories: log.vocab.num_categories(),
                events: log.num_events(),
                sessions: rows.len(),
                omega_minutes: omega,
            };
            let line = serde_json::to_string(&summary)?;
            std::fs::write(out.join("summary.json"), format!("{line}\n"))?;
            println!("{line}");
        }
        Command::Train { common, out } => {
            let cfg = common.config()?;
            let data = build_dataset(&load_log(&common.data)?, &cfg)?;
            let outcome = train(&cfg, &data)?;
            std::fs::create_dir_all(&out)?;
            outcome.checkpoint(&cfg).save(&out.join("checkpoint.txt"))?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            write_jsonl(&out.join("train_log.jsonl"), &outcome.log)?;
            write_csv(&out.join("train_log.csv"), &outcome.log)?;
            let mut records: Vec<MetricRecord> = Vec::new();
            for (split, inst, s) in [("val", &data.val, Stream::ValPools), ("test", &data.test, Stream::TestPools)] {
                let r = evaluate_split(&cfg, &outcome.model, &outcome.store, &data, inst, s)?;
                records.extend(r.records(split, cfg.variant, cfg.seed));
            }
            emit(&records, Some(&out), "metrics")?;
        }
        Command::Eval { checkpoint, data, split, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let log = load_log(&data)?;
            let cfg = super::config_from_checkpoint(&ck)?;
            let ds = build_dataset(&log, &cfg)?;
            let (cfg, store, model) = restore_model(&ck, &ds)?;
            let inst = if split == "val" { &ds.val } else { &ds.test };
            let r = evaluate_split(&cfg, &model, &store, &ds, inst, split_stream(&split)?)?;
            emit(&r.records(&split, cfg.variant, cfg.seed), out.as_deref(), "metrics")?;
        }
        Command::Ablate { common, multi } => {
            let cfg = common.config()?;
            let log = load_log(&common.data)?;
            let mut rows = Vec::new();
            for seed in multi.seeds(&cfg)? {
                rows.extend(run_ablation(&ExperimentConfig { seed, ..cfg.clone() }, &log)?);
            }
            emit(&rows, multi.out.as_deref(), "ablation")?;
        }
        Command::Robustness {
            common,
            multi,
            rates,
            variants,
            augmentations,
        } => {
            let cfg = common.config()?;
            let log = load_log(&common.data)?;
            let rates: Vec<f64> = parse_list(&rates)?;
            let variants: Vec<Variant> = parse_list(&variants)?;
            let augs: Vec<AugmentKind> = parse_list(&augmentations)?;
            let mut rows = Vec::new();
            for seed in multi.seeds(&cfg)? {
                rows.extend(run_robustness(&ExperimentConfig { seed, ..cfg.clone() }, &log, &rates, &variants, &augs)?);
            }
            emit(&rows, multi.out.as_deref(), "robustness")?;
        }
        Command::Sweep {
            common,
            multi,
            param,
            values,
        } => {
            let cfg = common.config()?;
            let log = load_log(&common.data)?;
            let param: SweepParam = param.parse()?;
            let values: Vec<f64> = parse_list(&values)?;
            let mut rows = Vec::new();
            for seed in multi.seeds(&cfg)? {
                rows.extend(run_sweep(&ExperimentConfig { seed, ..cfg.clone() }, &log, param, &values)?);
            }
            emit(&rows, multi.out.as_deref(), "sweep")?;
        }
        Command::AnalyzeAlpha { checkpoint, data, split, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let log = load_log(&data)?;
            let cfg = super::config_from_checkpoint(&ck)?;
            let ds = build_dataset(&log, &cfg)?;
            let (cfg, store, model) = restore_model(&ck, &ds)?;
            split_stream(&split)?;
            let inst = if split == "val" { &ds.val } else { &ds.test };
            let groups = alpha_split_analysis(&model, &store, cfg.variant, inst, &ds.vocab, cfg.eval_batch)?;
            let rows: Vec<AlphaRow> = groups
                .into_iter()
                .map(|g| AlphaRow {
                    behavior: g.behavior.to_string(),
                    mean_alpha: g.mean_alpha,
                    count: g.count,
                    variant: cfg.variant.slug().to_string(),
                    seed: cfg.seed,
                    split: split.clone(),
                })
                .collect();
            emit(&rows, out.as_deref(), "alpha")?;
        }
    }
    Ok(())
}

/// Parses the process arguments and runs; errors become a one-line
/// diagnostic and exit code 1.
pub fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
