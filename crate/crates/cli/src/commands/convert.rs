use std::path::PathBuf;

use adrgnn::data::ingest_temporal_json;
use clap::Args;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::output::{dataset_checksum, DatasetRef, OutDir, RunManifest};

/// Subdirectory of `--out` holding the converted container.
pub const DATASET_DIR: &str = "dataset";

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Upstream `{"edges": ..., "FX": ...}` file.
    #[arg(long)]
    pub temporal_json: PathBuf,
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value_t = 4)]
    pub tau_in: usize,
    #[arg(long, default_value_t = 1)]
    pub tau_out: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Store arrays inside the JSON manifest instead of .bin sidecars.
    #[arg(long)]
    pub inline: bool,
}

pub fn run(args: ConvertArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.temporal_json)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", args.temporal_json.display())))?;
    let config = json!({ "source": args.temporal_json, "name": args.name, "tau_in": args.tau_in, "tau_out": args.tau_out, "inline": args.inline });
    let ds = ingest_temporal_json(&text, &args.name, args.tau_in, args.tau_out)?;
    let out = OutDir::create(&args.out, RunManifest::new("convert", 0, config, 1))?;
    out.run(|out| {
        let dir = out.file(DATASET_DIR);
        ds.save(&dir, args.inline)?;
        println!(
            "{}: {} nodes, {} edges, {} frames → {}",
            ds.name,
            ds.n_nodes(),
            ds.graph.undirected_edges().len(),
            ds.n_frames(),
            dir.display()
        );
        out.set_dataset(DatasetRef { checksum: dataset_checksum(&dir)?, path: dir });
        Ok(())
    })
}
