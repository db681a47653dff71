use std::path::PathBuf;

use adrgnn::adr::Terms;
use adrgnn::train::{ablation_study, depth_energy_study, grid_search, term_subsets, TrainConfig};
use clap::Args;
use serde::Serialize;

use super::{init_pool, load_graph_dataset, parse_list, thread_count, SplitSel};
use crate::config::{resolve, ConfigFlags};
use crate::error::{CliError, CliResult};
use crate::output::{OutDir, RunManifest};

#[derive(Args, Debug)]
pub struct StudyArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "all")]
    pub splits: SplitSel,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub common: StudyArgs,
    /// Comma-separated depths.
    #[arg(long, default_value = "2,4,8,16,32,64")]
    pub depths: String,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: StudyArgs,
    /// Comma-separated term subsets; all seven nonempty subsets by default.
    #[arg(long)]
    pub subsets: Option<String>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: StudyArgs,
    /// Number of sampled configurations.
    #[arg(long, default_value_t = 20)]
    pub budget: usize,
    /// Split the search is scored on.
    #[arg(long, default_value_t = 0)]
    pub split: usize,
}

struct Prepared {
    bundle: adrgnn::data::DatasetBundle,
    cfg: TrainConfig,
    splits: Vec<usize>,
    out: OutDir,
}

fn prepare(command: &str, a: &StudyArgs, extra: serde_json::Value) -> CliResult<Prepared> {
    let (bundle, dref) = load_graph_dataset(&a.dataset)?;
    let cfg = resolve(&TrainConfig::default(), a.config.as_deref(), &a.flags, a.seed)?;
    let splits = a.splits.resolve(bundle.splits.len())?;
    let threads = thread_count(a.workers)?;
    init_pool(threads)?;
    let mut config = serde_json::json!({ "train": cfg });
    crate::config::overlay(&mut config, extra);
    let mut manifest = RunManifest::new(command, cfg.seed, config, threads);
    manifest.dataset = Some(dref);
    manifest.splits = Some(splits.clone());
    let out = OutDir::create(&a.out, manifest)?;
    Ok(Prepared { bundle, cfg, splits, out })
}

#[derive(Serialize)]
struct EnergyRow {
    model: String,
    depth: usize,
    layer: usize,
    relative_energy: f64,
}

#[derive(Serialize)]
struct AccuracyRow {
    model: String,
    depth: usize,
    accuracy_mean: f64,
    accuracy_std: f64,
}

pub fn energy(args: EnergyArgs) -> CliResult<()> {
    let depths: Vec<usize> = parse_list(&args.depths, "depth")?;
    if depths.contains(&0) {
        return Err(CliError::usage("depths must be positive"));
    }
    let p = prepare("energy", &args.common, serde_json::json!({ "depths": depths }))?;
    let Prepared { bundle, cfg, splits, out } = p;
    out.run(|out| {
        let rows = depth_energy_study(&bundle, &depths, &cfg, &splits)?;
        let mut energy = Vec::new();
        let mut acc = Vec::new();
        for r in &rows {
            let model = format!("{:?}", r.model).to_lowercase();
            println!("{model} depth {}: accuracy {:.4}, final relative energy {:.3e}", r.depth, r.accuracy.mean, r.relative_energy[r.depth]);
            for (layer, &e) in r.relative_energy.iter().enumerate() {
                energy.push(EnergyRow { model: model.clone(), depth: r.depth, layer, relative_energy: e });
            }
            acc.push(AccuracyRow { model, depth: r.depth, accuracy_mean: r.accuracy.mean, accuracy_std: r.accuracy.std });
        }
        out.write_rows("energy.csv", &energy)?;
        out.write_rows("depth_accuracy.csv", &acc)
    })
}

#[derive(Serialize)]
struct AblationRow {
    terms: String,
    accuracy_mean: f64,
    accuracy_std: f64,
    splits: usize,
}

#[derive(Serialize)]
struct AblationSplitRow {
    terms: String,
    split: usize,
    accuracy: f64,
}

pub fn ablate(args: AblateArgs) -> CliResult<()> {
    let subsets: Vec<Terms> = match &args.subsets {
        Some(s) => s
            .split(',')
            .map(|t| Terms::parse(t.trim()).map_err(|e| CliError::usage(format!("--subsets: {e}"))))
            .collect::<CliResult<_>>()?,
        None => term_subsets(),
    };
    let labels: Vec<String> = subsets.iter().map(|t| t.label()).collect();
    let Prepared { bundle, cfg, splits, out } = prepare("ablate", &args.common, serde_json::json!({ "subsets": labels }))?;
    out.run(|out| {
        let rows = ablation_study(&bundle, &subsets, &cfg, &splits)?;
        let mut summary = Vec::new();
        let mut per_split = Vec::new();
        for r in &rows {
            let terms = r.terms.label();
            println!("{terms}: accuracy {:.2} ± {:.2}", 100.0 * r.accuracy.mean, 100.0 * r.accuracy.std);
            for (&s, &a) in splits.iter().zip(&r.per_split) {
                per_split.push(AblationSplitRow { terms: terms.clone(), split: s, accuracy: a });
            }
            summary.push(AblationRow { terms, accuracy_mean: r.accuracy.mean, accuracy_std: r.accuracy.std, splits: r.accuracy.n });
        }
        out.write_rows("ablation.csv", &summary)?;
        out.write_rows("ablation_splits.csv", &per_split)
    })
}

#[derive(Serialize)]
struct TrialRow {
    index: usize,
    val_accuracy: f64,
    test_accuracy: f64,
    layers: usize,
    hidden: usize,
    h: f64,
    dropout: f64,
    hidden_dropout: f64,
    batch_norm: bool,
    config: String,
}

pub fn search(args: SearchArgs) -> CliResult<()> {
    let Prepared { bundle, cfg, out, .. } =
        prepare("search", &args.common, serde_json::json!({ "budget": args.budget, "split": args.split }))?;
    out.run(|out| {
        let result = grid_search(&bundle, &cfg, args.budget, cfg.seed, args.split)?;
        let trials: Vec<TrialRow> = result
            .trials
            .iter()
            .map(|t| {
                Ok(TrialRow {
                    index: t.index,
                    val_accuracy: t.val_accuracy,
                    test_accuracy: t.test_accuracy,
                    layers: t.config.layers,
                    hidden: t.config.hidden,
                    h: t.config.h,
                    dropout: t.config.dropout,
                    hidden_dropout: t.config.hidden_dropout,
                    batch_norm: t.config.batch_norm,
                    config: serde_json::to_string(&t.config)?,
                })
            })
            .collect::<CliResult<_>>()?;
        let best = &result.trials[result.best_index];
        println!("best trial {}: val {:.4}, test {:.4}", best.index, best.val_accuracy, best.test_accuracy);
        out.write_rows("search.csv", &trials)?;
        out.write_json("best_config.json", &result.best)
    })
}
