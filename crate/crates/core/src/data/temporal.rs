//! Node-level time series on a fixed graph: storage, windowing and
//! normalization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::bundle::{edges_array, read_edges};
use super::container::{Array, Container};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Matrix;

pub const KIND: &str = "temporal";

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalDataset {
    pub name: String,
    pub graph: Graph,
    pub edges: Vec<(usize, usize)>,
    /// One `n × c` matrix per frame.
    pub series: Vec<Matrix>,
    pub timestamps: Vec<f64>,
    pub tau_in: usize,
    pub tau_out: usize,
}

impl TemporalDataset {
    pub fn new(
        name: &str,
        n_nodes: usize,
        edges: Vec<(usize, usize)>,
        series: Vec<Matrix>,
        timestamps: Option<Vec<f64>>,
        tau_in: usize,
        tau_out: usize,
    ) -> Result<Self> {
        let graph = Graph::build(&edges, n_nodes, true)?;
        let timestamps = timestamps.unwrap_or_else(|| (0..series.len()).map(|t| t as f64).collect());
        let ds = Self { name: name.into(), graph, edges, series, timestamps, tau_in, tau_out };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n_nodes();
        let c = self.channels();
        if self.series.iter().any(|f| f.shape() != (n, c)) {
            return Err(Error::invalid(format!("every frame must be {n} × {c}")));
        }
        if self.timestamps.len() != self.series.len() {
            return Err(Error::invalid(format!(
                "{} timestamps for {} frames",
                self.timestamps.len(),
                self.series.len()
            )));
        }
        if self.tau_in < 1 || self.tau_out < 1 {
            return Err(Error::invalid("window lengths must be at least one frame"));
        }
        if self.series.len() < self.tau_in + self.tau_out {
            return Err(Error::invalid(format!(
                "series of {} frames is shorter than tau_in + tau_out = {}",
                self.series.len(),
                self.tau_in + self.tau_out
            )));
        }
        if self.series.iter().any(|f| !f.all_finite()) || self.timestamps.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("temporal series".into()));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn n_frames(&self) -> usize {
        self.series.len()
    }

    pub fn channels(&self) -> usize {
        self.series.first().map_or(0, Matrix::cols)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        Self::from_container(c).map_err(|e| match e {
            Error::Format { path: p, msg } if p.starts_with('#') => {
                Error::Format { path: format!("{}{p}", super::container::manifest_path(path).display()), msg }
            }
            other => other,
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != KIND {
            return Err(Error::format("#/kind", format!("expected \"{KIND}\", found \"{}\"", c.kind)));
        }
        let n = c.n_nodes;
        let edges = read_edges(&c, n)?;
        let shape = c.expect_shape("series", &[None, Some(n), None])?.shape.clone();
        let (t, ch) = (shape[0], shape[2]);
        let raw = c.f64_values("series")?;
        let series = (0..t)
            .map(|k| Matrix::from_vec(n, ch, raw[k * n * ch..(k + 1) * n * ch].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let timestamps = if c.arrays.contains_key("timestamps") {
            c.expect_shape("timestamps", &[Some(t)])?;
            Some(c.f64_values("timestamps")?.to_vec())
        } else {
            None
        };
        let window = |key: &str, default: usize| -> Result<usize> {
            match c.fields.get(key) {
                None => Ok(default),
                Some(v) => v
                    .as_u64()
                    .map(|x| x as usize)
                    .ok_or_else(|| Error::format(format!("#/{key}"), "expected a non-negative integer")),
            }
        };
        let tau_in = window("tau_in", 4)?;
        let tau_out = window("tau_out", 1)?;
        Self::new(&c.name, n, edges, series, timestamps, tau_in, tau_out)
    }

    pub fn to_container(&self) -> Container {
        let n = self.n_nodes();
        let mut c = Container::new(KIND, &self.name, n);
        c.fields.insert("tau_in".into(), json!(self.tau_in));
        c.fields.insert("tau_out".into(), json!(self.tau_out));
        c.arrays.insert("edges".into(), edges_array(&self.edges));
        let flat = self.series.iter().flat_map(|f| f.as_slice().iter().copied()).collect();
        c.arrays.insert("series".into(), Array::f64(vec![self.n_frames(), n, self.channels()], flat));
        c.arrays.insert("timestamps".into(), Array::f64(vec![self.n_frames()], self.timestamps.clone()));
        c
    }

    pub fn save(&self, dir: &Path, inline: bool) -> Result<()> {
        self.to_container().write(dir, inline)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Index of the first input frame.
    pub start: usize,
    /// `n × τ_in c`, frames concatenated oldest first.
    pub input: Matrix,
    /// `n × τ_out c`, the frames that follow.
    pub target: Matrix,
    /// Timestamps of the input frames, mapped affinely so the first frame of
    /// the series sits at 0 and the last at 1.
    pub frame_times: Vec<f64>,
}

fn stack(frames: &[Matrix]) -> Result<Matrix> {
    let refs: Vec<&Matrix> = frames.iter().collect();
    Matrix::concat_cols(&refs)
}

/// Every stride-1 window in chronological order.
pub fn make_windows(ds: &TemporalDataset) -> Result<Vec<Window>> {
    let (ti, to) = (ds.tau_in, ds.tau_out);
    if ti < 1 || to < 1 || ds.n_frames() < ti + to {
        return Err(Error::invalid(format!(
            "cannot window {} frames with tau_in = {ti}, tau_out = {to}",
            ds.n_frames()
        )));
    }
    let (first, last) = (ds.timestamps[0], ds.timestamps[ds.n_frames() - 1]);
    let span = if last != first { last - first } else { 1.0 };
    (0..=ds.n_frames() - ti - to)
        .map(|s| {
            Ok(Window {
                start: s,
                input: stack(&ds.series[s..s + ti])?,
                target: stack(&ds.series[s + ti..s + ti + to])?,
                frame_times: ds.timestamps[s..s + ti].iter().map(|t| (t - first) / span).collect(),
            })
        })
        .collect()
}

/// Chronological split: the first `floor(train_fraction · W)` windows train,
/// the rest form the forecasting horizon.
pub fn chronological_split(windows: &[Window], train_fraction: f64) -> Result<(&[Window], &[Window])> {
    if !(0.0..1.0).contains(&train_fraction) {
        return Err(Error::invalid(format!("train fraction {train_fraction} outside [0, 1)")));
    }
    let cut = (windows.len() as f64 * train_fraction).floor() as usize;
    if cut == 0 || cut == windows.len() {
        return Err(Error::invalid(format!(
            "{} windows cannot be split at fraction {train_fraction}",
            windows.len()
        )));
    }
    Ok(windows.split_at(cut))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScheme {
    /// Separate mean and deviation for every (node, channel).
    ZscorePerNode,
    /// One mean and deviation per channel over all nodes and frames.
    Global,
}

/// Affine map `(x − mean) / std` per (node, channel) and its inverse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub scheme: NormScheme,
    pub mean: Matrix,
    pub std: Matrix,
}

impl Normalizer {
    pub fn identity(scheme: NormScheme, n: usize, c: usize) -> Self {
        Self { scheme, mean: Matrix::zeros(n, c), std: Matrix::filled(n, c, 1.0) }
    }

    pub fn fit(ds: &TemporalDataset, scheme: NormScheme) -> Self {
        let (n, c, t) = (ds.n_nodes(), ds.channels(), ds.n_frames() as f64);
        let mut out = Self::identity(scheme, n, c);
        let mut degenerate = 0usize;
        match scheme {
            NormScheme::ZscorePerNode => {
                for i in 0..n {
                    for k in 0..c {
                        let mean = ds.series.iter().map(|f| f.get(i, k)).sum::<f64>() / t;
                        let var = ds.series.iter().map(|f| (f.get(i, k) - mean).powi(2)).sum::<f64>() / t;
                        if var > 0.0 {
                            out.mean.set(i, k, mean);
                            out.std.set(i, k, var.sqrt());
                        } else {
                            degenerate += 1;
                        }
                    }
                }
            }
            NormScheme::Global => {
                let count = t * n as f64;
                for k in 0..c {
                    let mean = ds.series.iter().map(|f| f.col_to_vec(k).iter().sum::<f64>()).sum::<f64>() / count;
                    let var = ds
                        .series
                        .iter()
                        .map(|f| f.col_to_vec(k).iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                        .sum::<f64>()
                        / count;
                    if var > 0.0 {
                        for i in 0..n {
                            out.mean.set(i, k, mean);
                            out.std.set(i, k, var.sqrt());
                        }
                    } else {
                        degenerate += 1;
                    }
                }
            }
        }
        if degenerate > 0 {
            log::warn!("{degenerate} constant series left unnormalized (identity transform)");
        }
        out
    }

    fn check(&self, x: &Matrix) -> Result<usize> {
        let c = self.mean.cols();
        if x.rows() != self.mean.rows() || c == 0 || !x.cols().is_multiple_of(c) {
            return Err(Error::shape(
                "normalizer",
                format!("{:?} is not a stack of {:?} frames", x.shape(), self.mean.shape()),
            ));
        }
        Ok(c)
    }

    /// Applies to one frame or to frames stacked along columns.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let c = self.check(x)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean.get(i, j % c)) / self.std.get(i, j % c);
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, x: &Matrix) -> Result<Matrix> {
        let c = self.check(x)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.std.get(i, j % c) + self.mean.get(i, j % c);
            }
        }
        Ok(out)
    }
}

pub fn normalize_series(ds: &TemporalDataset, scheme: NormScheme) -> Result<(TemporalDataset, Normalizer)> {
    let norm = Normalizer::fit(ds, scheme);
    let mut out = ds.clone();
    out.series = ds.series.iter().map(|f| norm.apply(f)).collect::<Result<_>>()?;
    out.validate()?;
    Ok((out, norm))
}

#[derive(Deserialize)]
struct UpstreamJson {
    edges: Vec<[usize; 2]>,
    #[serde(rename = "FX")]
    fx: Vec<Vec<f64>>,
}

/// Converts the upstream `{"edges": [[i, j], ...], "FX": [[per node], ...]}`
/// layout (one row per time step) into a single-channel dataset.
pub fn ingest_temporal_json(text: &str, name: &str, tau_in: usize, tau_out: usize) -> Result<TemporalDataset> {
    let raw: UpstreamJson = serde_json::from_str(text).map_err(|e| Error::format(name, e.to_string()))?;
    let n = raw.fx.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::format(format!("{name}#/FX"), "no frames"));
    }
    let series = raw
        .fx
        .iter()
        .enumerate()
        .map(|(t, row)| {
            if row.len() != n {
                return Err(Error::format(format!("{name}#/FX/{t}"), format!("{} values, expected {n}", row.len())));
            }
            Matrix::from_vec(n, 1, row.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let edges = raw.edges.iter().map(|e| (e[0], e[1])).collect();
    TemporalDataset::new(name, n, edges, series, None, tau_in, tau_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upstream_json() {
        let text = r#"{"edges": [[0, 1], [1, 2]], "FX": [[1, 2, 3], [4, 5, 6]], "node_ids": {}}"#;
        let ds = ingest_temporal_json(text, "toy", 1, 1).unwrap();
        assert_eq!(ds.n_nodes(), 3);
        assert_eq!(ds.series[1], Matrix::column(&[4.0, 5.0, 6.0]));
        assert!(ingest_temporal_json(r#"{"edges": [], "FX": [[1, 2], [3]]}"#, "bad", 1, 1).is_err());
    }

    #[test]
    fn split_is_chronological() {
        let frames = (0..12).map(|t| Matrix::filled(2, 1, t as f64)).collect();
        let ds = TemporalDataset::new("s", 2, vec![(0, 1)], frames, None, 2, 1).unwrap();
        let w = make_windows(&ds).unwrap();
        let (train, test) = chronological_split(&w, 0.9).unwrap();
        assert_eq!((train.len(), test.len()), (9, 1));
        assert!(train.iter().all(|a| test.iter().all(|b| a.start < b.start)));
    }
}
