use std::path::PathBuf;

use adrgnn::data::{DatasetBundle, TemporalDataset};
use adrgnn::model::Model;
use adrgnn::train::{mean_std, train_splits, train_temporal, TemporalRun, TrainConfig};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use super::{init_pool, load_dataset, thread_count, Dataset, SplitSel};
use crate::config::{resolve, ConfigFlags};
use crate::error::{CliError, CliResult};
use crate::output::{MetricRow, OutDir, RunManifest, CHECKPOINT};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset container (directory or its manifest.json).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// JSON training configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// `all` or the number of leading splits to train on.
    #[arg(long, default_value = "all")]
    pub splits: SplitSel,
    /// Repetitions for temporal datasets, seeded seed, seed + 1, ...
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Splits or repetitions trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Re-run exactly what a previous run's manifest.json records.
    #[arg(long, conflicts_with_all = ["dataset", "config", "seed"])]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Serialize)]
struct HistoryRow {
    split: usize,
    epoch: usize,
    loss: f64,
    train_accuracy: f64,
    val_accuracy: f64,
    val_loss: f64,
}

#[derive(Serialize)]
struct LossRow {
    repeat: usize,
    epoch: usize,
    loss: f64,
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    let (dataset_path, cfg, splits, repeats) = match &args.manifest {
        Some(m) => {
            let prev = RunManifest::read(m)?;
            if prev.command != "train" {
                return Err(CliError::usage(format!("{} records a {} run, not train", m.display(), prev.command)));
            }
            let ds = prev.dataset.ok_or_else(|| CliError::usage("manifest has no dataset"))?;
            let cfg: TrainConfig = serde_json::from_value(prev.config)
                .map_err(|e| CliError::usage(format!("{}: invalid config: {e}", m.display())))?;
            let repeats = prev.splits.as_ref().map(|s| s.len()).unwrap_or(1);
            (ds.path, Some(cfg), prev.splits, repeats)
        }
        None => (super::required(&args.dataset, "dataset")?, None, None, args.repeats),
    };
    let (dataset, dref) = load_dataset(&dataset_path)?;
    let threads = thread_count(args.workers)?;
    init_pool(threads)?;

    match dataset {
        Dataset::Graph(bundle) => {
            let cfg = match cfg {
                Some(c) => c,
                None => resolve(&TrainConfig::default(), args.config.as_deref(), &args.flags, args.seed)?,
            };
            let splits = match splits {
                Some(s) => s,
                None => args.splits.resolve(bundle.splits.len())?,
            };
            let mut manifest = RunManifest::new("train", cfg.seed, serde_json::to_value(&cfg)?, threads);
            manifest.dataset = Some(dref);
            manifest.splits = Some(splits.clone());
            OutDir::create(&args.out, manifest)?.run(|out| train_graph(out, &bundle, &cfg, &splits))
        }
        Dataset::Temporal(mut ds) => {
            let cfg = match cfg {
                Some(c) => c,
                None => {
                    let base = TrainConfig { tau_in: ds.tau_in, tau_out: ds.tau_out, ..TrainConfig::temporal() };
                    resolve(&base, args.config.as_deref(), &args.flags, args.seed)?
                }
            };
            if repeats == 0 {
                return Err(CliError::usage("--repeats must be at least 1"));
            }
            ds.tau_in = cfg.tau_in;
            ds.tau_out = cfg.tau_out;
            let reps: Vec<usize> = (0..repeats).collect();
            let mut manifest = RunManifest::new("train", cfg.seed, serde_json::to_value(&cfg)?, threads);
            manifest.dataset = Some(dref);
            manifest.splits = Some(reps.clone());
            OutDir::create(&args.out, manifest)?.run(|out| train_series(out, &ds, &cfg, &reps))
        }
    }
}

fn train_graph(out: &mut OutDir, bundle: &DatasetBundle, cfg: &TrainConfig, splits: &[usize]) -> CliResult<()> {
    println!("training {} on {} ({} splits)", model_label(cfg), bundle.name, splits.len());
    let runs = train_splits(bundle, cfg, splits)?;
    let mut rows = Vec::new();
    let mut history = Vec::new();
    let mut accs = Vec::new();
    for (&s, run) in splits.iter().zip(&runs) {
        let acc = run.test.accuracy.unwrap_or(f64::NAN);
        println!("split {s}: test accuracy {acc:.4}, best val {:.4} at epoch {}", run.best_val_accuracy, run.best_epoch);
        accs.push(acc);
        for (name, v) in run.test.pairs() {
            rows.push(MetricRow::new(&bundle.name, s, cfg.seed, &format!("test_{name}"), v));
        }
        rows.push(MetricRow::new(&bundle.name, s, cfg.seed, "best_val_accuracy", run.best_val_accuracy));
        rows.push(MetricRow::new(&bundle.name, s, cfg.seed, "best_epoch", run.best_epoch as f64));
        history.extend(run.history.iter().map(|h| HistoryRow {
            split: s,
            epoch: h.epoch,
            loss: h.loss,
            train_accuracy: h.train_accuracy,
            val_accuracy: h.val_accuracy,
            val_loss: h.val_loss,
        }));
        save_checkpoint(out, &run.model, s, splits[0])?;
    }
    let summary = mean_std(&accs);
    rows.push(MetricRow::new(&bundle.name, "mean", cfg.seed, "test_accuracy", summary.mean));
    rows.push(MetricRow::new(&bundle.name, "std", cfg.seed, "test_accuracy", summary.std));
    println!("test accuracy {:.2} ± {:.2} over {} splits", 100.0 * summary.mean, 100.0 * summary.std, summary.n);
    out.write_metrics(&rows)?;
    out.write_rows("history.csv", &history)
}

fn train_series(out: &mut OutDir, ds: &TemporalDataset, cfg: &TrainConfig, reps: &[usize]) -> CliResult<()> {
    println!("training the forecaster on {} ({} repetitions)", ds.name, reps.len());
    let runs: Vec<TemporalRun> = reps
        .par_iter()
        .map(|&r| {
            let c = TrainConfig { seed: cfg.seed + r as u64, ..cfg.clone() };
            train_temporal(c.temporal_config(ds.channels()), ds, &c)
        })
        .collect::<adrgnn::Result<_>>()?;
    let mut rows = Vec::new();
    let mut losses = Vec::new();
    let mut mses = Vec::new();
    for (&r, run) in reps.iter().zip(&runs) {
        let seed = cfg.seed + r as u64;
        let mse = run.test.mse.unwrap_or(f64::NAN);
        println!("repeat {r}: horizon MSE {mse:.4} ({} train / {} test windows)", run.n_train_windows, run.n_test_windows);
        mses.push(mse);
        for (name, v) in run.test.pairs() {
            rows.push(MetricRow::new(&ds.name, r, seed, &format!("test_{name}"), v));
        }
        losses.extend(run.epoch_losses.iter().enumerate().map(|(epoch, &loss)| LossRow { repeat: r, epoch, loss }));
        save_checkpoint(out, &Model::Temporal(run.model.clone()), r, reps[0])?;
        if let Some(n) = &run.normalizer {
            if r == reps[0] {
                out.write_json("normalizer.json", n)?;
            }
        }
    }
    let summary = mean_std(&mses);
    rows.push(MetricRow::new(&ds.name, "mean", cfg.seed, "test_mse", summary.mean));
    rows.push(MetricRow::new(&ds.name, "std", cfg.seed, "test_mse", summary.std));
    println!("horizon MSE {:.4} ± {:.4} over {} repetitions", summary.mean, summary.std, summary.n);
    out.write_metrics(&rows)?;
    out.write_rows("history.csv", &losses)
}

fn save_checkpoint(out: &mut OutDir, model: &Model, index: usize, first: usize) -> CliResult<()> {
    let name = if index == first { CHECKPOINT.to_string() } else { format!("checkpoint-{index}.bin") };
    model.save(&out.file(&name))?;
    Ok(())
}

fn model_label(cfg: &TrainConfig) -> String {
    match cfg.model {
        adrgnn::train::ModelKind::Adr => format!("ADR-GNN [{}] with {} layers", cfg.terms.label(), cfg.layers),
        adrgnn::train::ModelKind::Gcn => format!("GCN with {} layers", cfg.layers),
    }
}
