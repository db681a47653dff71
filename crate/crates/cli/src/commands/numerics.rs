use std::collections::BTreeMap;
use std::path::PathBuf;

use adrgnn::gradcheck::fixture_suite;
use adrgnn::splitting::splitting_sweep;
use clap::Args;
use serde::Serialize;
use serde_json::json;

use super::parse_list;
use crate::error::{CliError, CliResult};
use crate::output::{OutDir, RunManifest};

#[derive(Args, Debug)]
pub struct SplitStudyArgs {
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Matrix size of the random triples.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Largest step size; the sweep halves it `--levels - 1` times.
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    /// Explicit comma-separated step sizes (overrides --dt and --levels).
    #[arg(long)]
    pub dts: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SweepRow {
    dt: f64,
    discrepancy: f64,
    ratio_to_next: Option<f64>,
}

pub fn split_study(args: SplitStudyArgs) -> CliResult<()> {
    let dts: Vec<f64> = match &args.dts {
        Some(s) => parse_list(s, "step size")?,
        None => (0..args.levels).map(|k| args.dt / 2f64.powi(k as i32)).collect(),
    };
    if args.trials == 0 || args.n == 0 || dts.is_empty() || dts.iter().any(|&d| !(d > 0.0)) {
        return Err(CliError::usage("split-study needs --trials ≥ 1, --n ≥ 1 and positive step sizes"));
    }
    let config = json!({ "trials": args.trials, "n": args.n, "dts": dts });
    let out = OutDir::create(&args.out, RunManifest::new("split-study", args.seed, config, 1))?;
    out.run(|out| {
        let points = splitting_sweep(args.n, &dts, args.trials, args.seed)?;
        out.write_rows("split_study_trials.csv", &points)?;
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for p in &points {
            let k = dts.iter().position(|&d| d == p.dt).expect("dt from the sweep");
            *sums.entry(k).or_default() += p.discrepancy / args.trials as f64;
        }
        let means: Vec<f64> = (0..dts.len()).map(|k| sums[&k]).collect();
        let rows: Vec<SweepRow> = (0..dts.len())
            .map(|k| SweepRow { dt: dts[k], discrepancy: means[k], ratio_to_next: means.get(k + 1).map(|m| means[k] / m) })
            .collect();
        for r in &rows {
            match r.ratio_to_next {
                Some(q) => println!("dt {:<10} discrepancy {:.3e}  ratio {q:.3}", r.dt, r.discrepancy),
                None => println!("dt {:<10} discrepancy {:.3e}", r.dt, r.discrepancy),
            }
        }
        out.write_rows("split_study.csv", &rows)
    })
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct CheckRow {
    check: String,
    relative_error: f64,
    tolerance: f64,
    passed: bool,
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let out = OutDir::create(&args.out, RunManifest::new("gradcheck", args.seed, json!({}), 1))?;
    out.run(|out| {
        let suite = fixture_suite(args.seed)?;
        let rows: Vec<CheckRow> = suite
            .iter()
            .map(|e| CheckRow { check: e.name.clone(), relative_error: e.relative_error, tolerance: e.tolerance, passed: e.passed() })
            .collect();
        for r in &rows {
            println!("{:<16} {:.2e} (tol {:.0e}) {}", r.check, r.relative_error, r.tolerance, if r.passed { "ok" } else { "FAIL" });
        }
        out.write_rows("gradcheck.csv", &rows)?;
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::numeric(format!("gradient checks over tolerance: {}", failed.join(", "))))
        }
    })
}
