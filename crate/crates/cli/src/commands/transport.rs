use std::path::PathBuf;

use adrgnn::adr::Terms;
use adrgnn::data::make_transport_task;
use adrgnn::train::{fit_transport, TransportConfig};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::output::{MetricRow, OutDir, RunManifest};

#[derive(Args, Debug)]
pub struct TransportArgs {
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Edge probability of the random graph.
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 2)]
    pub sources: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated term subsets, each fitted separately (e.g. "A,D,R,ADR").
    #[arg(long, default_value = "A,D,R")]
    pub terms: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Serialize)]
struct SummaryRow {
    terms: String,
    final_mse: f64,
}

#[derive(Serialize)]
struct NodeRow {
    terms: String,
    node: usize,
    role: &'static str,
    source: f64,
    target: f64,
    fitted: f64,
}

#[derive(Serialize)]
struct LogRow {
    terms: String,
    step: usize,
    mse: f64,
    mass: f64,
}

#[derive(Serialize)]
struct EdgeRow {
    src: usize,
    dst: usize,
}

pub fn run(args: TransportArgs) -> CliResult<()> {
    let subsets: Vec<Terms> = args
        .terms
        .split(',')
        .map(|t| Terms::parse(t.trim()).map_err(|e| CliError::usage(format!("--terms: {e}"))))
        .collect::<CliResult<_>>()?;
    let defaults = TransportConfig::default();
    let cfg = TransportConfig {
        layers: args.layers.unwrap_or(defaults.layers),
        steps: args.steps.unwrap_or(defaults.steps),
        lr: args.lr.unwrap_or(defaults.lr),
        seed: args.seed,
        ..defaults
    };
    let task = make_transport_task(args.n, args.p, args.sources, args.seed)?;
    let config = json!({
        "n": args.n,
        "p": args.p,
        "sources": args.sources,
        "terms": subsets.iter().map(|t| t.label()).collect::<Vec<_>>(),
        "fit": cfg,
        "graph_seed": task.graph_seed,
    });
    let out = OutDir::create(&args.out, RunManifest::new("transport", args.seed, config, 1))?;
    out.run(|out| {
        let edges: Vec<EdgeRow> = task.graph.undirected_edges().into_iter().map(|(src, dst)| EdgeRow { src, dst }).collect();
        out.write_rows("transport_edges.csv", &edges)?;
        let mut summary = Vec::new();
        let mut nodes = Vec::new();
        let mut log = Vec::new();
        let mut metrics = Vec::new();
        for &terms in &subsets {
            let fit = fit_transport(&task, terms, &cfg)?;
            let label = terms.label();
            println!("{label}: final MSE {:.3e}", fit.final_mse);
            summary.push(SummaryRow { terms: label.clone(), final_mse: fit.final_mse });
            metrics.push(MetricRow::new("transport", &label, args.seed, "final_mse", fit.final_mse));
            for i in 0..task.graph.n_nodes() {
                let role = if i == task.destination {
                    "destination"
                } else if task.source_set.contains(&i) {
                    "source"
                } else {
                    "other"
                };
                nodes.push(NodeRow {
                    terms: label.clone(),
                    node: i,
                    role,
                    source: task.source_features.get(i, 0),
                    target: task.target_features.get(i, 0),
                    fitted: fit.prediction.get(i, 0),
                });
            }
            log.extend(fit.history.iter().map(|l| LogRow { terms: label.clone(), step: l.step, mse: l.mse, mass: l.mass }));
        }
        out.write_rows("transport.csv", &summary)?;
        out.write_rows("transport_nodes.csv", &nodes)?;
        out.write_rows("transport_log.csv", &log)?;
        out.write_metrics(&metrics)
    })
}
