//! Output directory, run manifest and result files.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";

pub fn version() -> String {
    match option_env!("ADRGNN_GIT_REV") {
        Some(rev) => format!("v{}-g{rev}", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn version_static() -> &'static str {
    static V: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    V.get_or_init(version)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    /// `sha256:` over every file of the dataset directory.
    pub checksum: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    /// Resolved configuration with every default filled in.
    pub config: Value,
    pub dataset: Option<DatasetRef>,
    pub splits: Option<Vec<usize>>,
    pub threads: usize,
    pub started_unix: f64,
    pub wall_clock_seconds: Option<f64>,
    pub status: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value, threads: usize) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            version: version(),
            seed,
            config,
            dataset: None,
            splits: None,
            threads,
            started_unix,
            wall_clock_seconds: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: invalid manifest: {e}", path.display())))
    }
}

/// Hash of the dataset: file names, lengths and bytes of every regular file
/// in its directory (or of the single file), in name order.
pub fn dataset_checksum(path: &Path) -> CliResult<String> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for f in files {
        buf.clear();
        File::open(&f)?.read_to_end(&mut buf)?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update(name.as_bytes());
        h.update([0]);
        h.update((buf.len() as u64).to_le_bytes());
        h.update(&buf);
    }
    let digest = h.finalize();
    Ok(format!("sha256:{}", digest.iter().map(|b| format!("{b:02x}")).collect::<String>()))
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct MetricRow {
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(dataset: &str, split: impl ToString, seed: u64, metric: &str, value: f64) -> Self {
        Self { dataset: dataset.into(), split: split.to_string(), seed, metric: metric.into(), value }
    }
}

pub struct OutDir {
    root: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl OutDir {
    /// Creates the directory and writes the manifest with status "running".
    pub fn create(root: &Path, manifest: RunManifest) -> CliResult<Self> {
        std::fs::create_dir_all(root)
            .map_err(|e| CliError::usage(format!("cannot create output directory {}: {e}", root.display())))?;
        let out = Self { root: root.to_path_buf(), manifest, started: Instant::now() };
        out.write_manifest()?;
        Ok(out)
    }

    fn write_manifest(&self) -> CliResult<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.root.join(MANIFEST), text + "\n")?;
        Ok(())
    }

    pub fn set_dataset(&mut self, dataset: DatasetRef) {
        self.manifest.dataset = Some(dataset);
    }

    /// Path of an output file, recorded in the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
        }
        self.root.join(name)
    }

    pub fn csv(&mut self, name: &str) -> CliResult<csv::Writer<File>> {
        let path = self.file(name);
        Ok(csv::Writer::from_path(path)?)
    }

    pub fn write_rows<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        let mut w = self.csv(name)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let path = self.file(name);
        std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    /// `metrics.csv` and the same rows as JSON lines.
    pub fn write_metrics(&mut self, rows: &[MetricRow]) -> CliResult<()> {
        self.write_rows(METRICS_CSV, rows)?;
        let mut w = BufWriter::new(File::create(self.file(METRICS_JSONL))?);
        for r in rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Runs `f`, then records "ok" or the failure in the manifest.
    pub fn run(mut self, f: impl FnOnce(&mut Self) -> CliResult<()>) -> CliResult<()> {
        match f(&mut self) {
            Ok(()) => self.finish("ok"),
            Err(e) => {
                if let Err(w) = self.finish(&format!("failed: {:#}", e.error)) {
                    log::error!("could not update the manifest: {:#}", w.error);
                }
                Err(e)
            }
        }
    }

    /// Rewrites the manifest with the final status and elapsed time.
    pub fn finish(mut self, status: &str) -> CliResult<()> {
        self.manifest.status = status.into();
        self.manifest.wall_clock_seconds = Some(self.started.elapsed().as_secs_f64());
        self.write_manifest()
    }
}
