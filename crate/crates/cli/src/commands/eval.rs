use std::path::PathBuf;

use adrgnn::data::{chronological_split, make_windows, Normalizer};
use adrgnn::model::Model;
use adrgnn::train::{evaluate_node, evaluate_temporal, SplitPart};
use clap::{Args, ValueEnum};
use serde_json::json;

use super::{load_dataset, Dataset, SplitSel};
use crate::config::read_json;
use crate::error::{CliError, CliResult};
use crate::output::{MetricRow, OutDir, RunManifest};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Recorded with the metrics; evaluation itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "all")]
    pub splits: SplitSel,
    /// Node subset to score on graph datasets.
    #[arg(long, value_enum, default_value = "test")]
    pub part: Part,
    /// Share of windows before the forecasting horizon (temporal datasets).
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
    /// normalizer.json written by a normalized temporal training run.
    #[arg(long)]
    pub normalizer: Option<PathBuf>,
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let (dataset, dref) = load_dataset(&args.dataset)?;
    if !args.checkpoint.exists() {
        return Err(CliError::usage(format!("checkpoint not found: {}", args.checkpoint.display())));
    }
    let model = Model::load(&args.checkpoint)?;
    let config = json!({
        "checkpoint": args.checkpoint,
        "model": model.config(),
        "part": format!("{:?}", args.part).to_lowercase(),
        "train_fraction": args.train_fraction,
        "normalizer": args.normalizer,
    });
    let mut manifest = RunManifest::new("eval", args.seed, config, 1);
    manifest.dataset = Some(dref);
    let out = OutDir::create(&args.out, manifest)?;
    out.run(|out| {
        let mut rows = Vec::new();
        match (&dataset, &model) {
            (Dataset::Graph(b), Model::Static(_) | Model::Gcn(_)) => {
                let part = match args.part {
                    Part::Train => SplitPart::Train,
                    Part::Val => SplitPart::Val,
                    Part::Test => SplitPart::Test,
                };
                for s in args.splits.resolve(b.splits.len())? {
                    let m = evaluate_node(&model, b, s, part)?;
                    println!("split {s}: accuracy {:.4}", m.accuracy.unwrap_or(f64::NAN));
                    for (name, v) in m.pairs() {
                        rows.push(MetricRow::new(&b.name, s, args.seed, name, v));
                    }
                }
            }
            (Dataset::Temporal(ds), Model::Temporal(m)) => {
                let mut ds = ds.clone();
                ds.tau_in = m.config.tau_in;
                ds.tau_out = m.config.tau_out;
                let norm: Option<Normalizer> = match &args.normalizer {
                    Some(p) => Some(
                        serde_json::from_value(read_json(p)?)
                            .map_err(|e| CliError::usage(format!("{}: invalid normalizer: {e}", p.display())))?,
                    ),
                    None => None,
                };
                if let Some(n) = &norm {
                    ds.series = ds.series.iter().map(|f| n.apply(f)).collect::<adrgnn::Result<_>>()?;
                }
                let windows = make_windows(&ds)?;
                let (_, horizon) = chronological_split(&windows, args.train_fraction)?;
                let metrics = evaluate_temporal(m, &ds, horizon, norm.as_ref())?;
                println!("horizon MSE {:.4} over {} windows", metrics.mse.unwrap_or(f64::NAN), horizon.len());
                for (name, v) in metrics.pairs() {
                    rows.push(MetricRow::new(&ds.name, "horizon", args.seed, name, v));
                }
            }
            _ => {
                return Err(CliError::usage(format!(
                    "checkpoint {} does not fit dataset {}",
                    args.checkpoint.display(),
                    dataset.name()
                )))
            }
        }
        out.write_metrics(&rows)
    })
}
