pub mod convert;
pub mod eval;
pub mod numerics;
pub mod studies;
pub mod train;
pub mod transport;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use adrgnn::data::{Container, DatasetBundle, TemporalDataset};

use crate::error::{CliError, CliResult};
use crate::output::{dataset_checksum, DatasetRef};

pub enum Dataset {
    Graph(DatasetBundle),
    Temporal(TemporalDataset),
}

impl Dataset {
    pub fn name(&self) -> &str {
        match self {
            Dataset::Graph(b) => &b.name,
            Dataset::Temporal(t) => &t.name,
        }
    }
}

/// Loads a dataset container of either kind; a missing path is a usage error.
pub fn load_dataset(path: &Path) -> CliResult<(Dataset, DatasetRef)> {
    if !path.exists() {
        return Err(CliError::usage(format!("dataset not found: {}", path.display())));
    }
    let kind = Container::read(path)?.kind;
    let ds = match kind.as_str() {
        "graph" => Dataset::Graph(DatasetBundle::load(path)?),
        "temporal" => Dataset::Temporal(TemporalDataset::load(path)?),
        other => return Err(CliError::usage(format!("{}: unknown dataset kind {other:?}", path.display()))),
    };
    let checksum = dataset_checksum(path)?;
    Ok((ds, DatasetRef { path: path.to_path_buf(), checksum }))
}

pub fn load_graph_dataset(path: &Path) -> CliResult<(DatasetBundle, DatasetRef)> {
    match load_dataset(path)? {
        (Dataset::Graph(b), r) => Ok((b, r)),
        (Dataset::Temporal(_), _) => {
            Err(CliError::usage(format!("{}: this command needs a graph dataset, not a temporal one", path.display())))
        }
    }
}

pub fn required(path: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    path.clone().ok_or_else(|| CliError::usage(format!("missing --{flag}")))
}

/// `all` or a count `K` of leading splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSel {
    All,
    First(usize),
}

impl FromStr for SplitSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(SplitSel::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(SplitSel::First(k)),
            _ => Err(format!("expected `all` or a positive split count, got {s:?}")),
        }
    }
}

impl SplitSel {
    pub fn resolve(self, available: usize) -> CliResult<Vec<usize>> {
        match self {
            SplitSel::All => Ok((0..available).collect()),
            SplitSel::First(k) if k <= available => Ok((0..k).collect()),
            SplitSel::First(k) => Err(CliError::usage(format!("asked for {k} splits, dataset has {available}"))),
        }
    }
}

pub fn parse_list<T: FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    let items: Result<Vec<T>, _> = s.split(',').map(|x| x.trim().parse::<T>()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::usage(format!("invalid {what} list {s:?}"))),
    }
}

/// Worker count for split fan-out, capped by `ADRGNN_THREADS` when set.
pub fn thread_count(workers: usize) -> CliResult<usize> {
    let cap = match std::env::var("ADRGNN_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("ADRGNN_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => usize::MAX,
    };
    Ok(workers.max(1).min(cap))
}

pub fn init_pool(threads: usize) -> CliResult<()> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(CliError::other)
}
