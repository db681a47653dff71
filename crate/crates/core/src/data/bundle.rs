//! Node-classification datasets and split generation.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::container::{Array, Container};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::rng_from_seed;
use crate::tensor::Matrix;

pub const KIND: &str = "graph";
pub const DEFAULT_RATIOS: [f64; 3] = [0.48, 0.32, 0.20];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Split {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train.len() != n || self.val.len() != n || self.test.len() != n {
            return Err(Error::invalid(format!("split masks must have length {n}")));
        }
        for i in 0..n {
            if u8::from(self.train[i]) + u8::from(self.val[i]) + u8::from(self.test[i]) > 1 {
                return Err(Error::invalid(format!("node {i} appears in more than one mask")));
            }
        }
        Ok(())
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (count(&self.train), count(&self.val), count(&self.test))
    }
}

/// Free-form provenance carried alongside the arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homophily: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    /// `"geom-gcn"` for converted published splits, `"generated"` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Set when the loader row-normalized the stored features.
    #[serde(default)]
    pub features_row_normalized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub graph: Graph,
    /// Edge list as stored; `graph` is its symmetrized, deduplicated form.
    pub edges: Vec<(usize, usize)>,
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub splits: Vec<Split>,
    pub metadata: Metadata,
}

impl DatasetBundle {
    pub fn new(
        name: &str,
        n_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Matrix,
        labels: Option<Vec<usize>>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let graph = Graph::build(&edges, n_nodes, true)?;
        let bundle = Self { name: name.into(), graph, edges, features, labels, splits, metadata: Metadata::default() };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n_nodes();
        if self.features.rows() != n {
            return Err(Error::invalid(format!("features have {} rows for {n} nodes", self.features.rows())));
        }
        if !self.features.all_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} nodes", labels.len())));
            }
        }
        if self.splits.is_empty() {
            return Err(Error::invalid("dataset has no splits"));
        }
        for s in &self.splits {
            s.validate(n)?;
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn n_classes(&self) -> usize {
        self.metadata
            .n_classes
            .or_else(|| self.labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1))
            .unwrap_or(0)
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
        let fx = c.expect_shape("features", &[Some(n), None])?;
        let cols = fx.shape[1];
        let mut features = Matrix::from_vec(n, cols, c.f64_values("features")?.to_vec())?;

        let labels = if c.arrays.contains_key("labels") {
            c.expect_shape("labels", &[Some(n)])?;
            let raw = c.i64_values("labels")?;
            let labels = raw
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    usize::try_from(v).map_err(|_| Error::format(format!("#/arrays/labels/data/{i}"), "negative label"))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        } else {
            None
        };

        let train = read_masks(&c, "train_masks", n)?;
        let val = read_masks(&c, "val_masks", n)?;
        let test = read_masks(&c, "test_masks", n)?;
        if train.len() != val.len() || train.len() != test.len() {
            return Err(Error::format("#/arrays", "train/val/test mask counts differ"));
        }
        let splits: Vec<Split> =
            train.into_iter().zip(val).zip(test).map(|((train, val), test)| Split { train, val, test }).collect();
        for (k, s) in splits.iter().enumerate() {
            s.validate(n).map_err(|e| Error::format(format!("#/arrays/train_masks (split {k})"), e.to_string()))?;
        }

        let mut metadata: Metadata = serde_json::from_value(Value::Object(c.metadata.clone()))
            .map_err(|e| Error::format("#/metadata", e.to_string()))?;
        if c.normalize_features {
            row_normalize(&mut features);
            metadata.features_row_normalized = true;
        }
        let graph = Graph::build(&edges, n, true)?;
        let bundle = Self { name: c.name, graph, edges, features, labels, splits, metadata };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn to_container(&self) -> Result<Container> {
        let n = self.n_nodes();
        let mut c = Container::new(KIND, &self.name, n);
        c.arrays.insert("edges".into(), edges_array(&self.edges));
        c.arrays.insert(
            "features".into(),
            Array::f64(vec![n, self.features.cols()], self.features.as_slice().to_vec()),
        );
        if let Some(labels) = &self.labels {
            c.arrays.insert("labels".into(), Array::i64(vec![n], labels.iter().map(|&l| l as i64).collect()));
        }
        let k = self.splits.len();
        let pack = |f: fn(&Split) -> &Vec<bool>| {
            Array::i64(vec![k, n], self.splits.iter().flat_map(|s| f(s).iter().map(|&b| i64::from(b))).collect())
        };
        c.arrays.insert("train_masks".into(), pack(|s| &s.train));
        c.arrays.insert("val_masks".into(), pack(|s| &s.val));
        c.arrays.insert("test_masks".into(), pack(|s| &s.test));
        c.metadata = match serde_json::to_value(&self.metadata) {
            Ok(Value::Object(m)) => m,
            _ => return Err(Error::format("#/metadata", "metadata must serialize to an object")),
        };
        Ok(c)
    }

    /// Features are written as held in memory, so a bundle loaded with row
    /// normalization saves already-normalized values (and the flag off).
    pub fn save(&self, dir: &Path, inline: bool) -> Result<()> {
        self.to_container()?.write(dir, inline)
    }
}

pub(crate) fn read_edges(c: &Container, n: usize) -> Result<Vec<(usize, usize)>> {
    c.expect_shape("edges", &[None, Some(2)])?;
    let raw = c.i64_values("edges")?;
    raw.chunks_exact(2)
        .enumerate()
        .map(|(e, pair)| {
            let ok = |v: i64| usize::try_from(v).ok().filter(|&v| v < n);
            match (ok(pair[0]), ok(pair[1])) {
                (Some(s), Some(t)) => Ok((s, t)),
                _ => Err(Error::format(
                    format!("#/arrays/edges/data/{}", 2 * e),
                    format!("edge ({}, {}) out of range for {n} nodes", pair[0], pair[1]),
                )),
            }
        })
        .collect()
}

pub(crate) fn edges_array(edges: &[(usize, usize)]) -> Array {
    Array::i64(vec![edges.len(), 2], edges.iter().flat_map(|&(s, t)| [s as i64, t as i64]).collect())
}

fn read_masks(c: &Container, key: &str, n: usize) -> Result<Vec<Vec<bool>>> {
    let shape = &c.expect_shape(key, &[None, Some(n)])?.shape;
    let raw = c.i64_values(key)?;
    let mut out = Vec::with_capacity(shape[0]);
    for (k, row) in raw.chunks_exact(n.max(1)).enumerate().take(shape[0]) {
        let mask = row
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::format(format!("#/arrays/{key}/data/{}", k * n + i), "mask entries must be 0 or 1")),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(mask);
    }
    Ok(out)
}

/// Scales each row to unit sum; all-zero rows are left alone.
pub fn row_normalize(x: &mut Matrix) {
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Fraction of undirected edges whose endpoints share a label.
pub fn edge_homophily(graph: &Graph, labels: &[usize]) -> f64 {
    let edges = graph.undirected_edges();
    if edges.is_empty() {
        return 0.0;
    }
    let same = edges.iter().filter(|&&(s, t)| labels[s] == labels[t]).count();
    same as f64 / edges.len() as f64
}

fn part_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let train = floor(ratios[0]);
    let val = floor(ratios[1]);
    let total: f64 = ratios.iter().sum();
    let test = if (total - 1.0).abs() < 1e-9 { n - train - val } else { floor(ratios[2]) };
    [train, val, test]
}

/// `k` seeded splits. Each shuffles the nodes (within each class when
/// `stratify` is given) and cuts the permutation by `ratios`; when the ratios
/// sum to one the test part takes the remainder so the masks cover every
/// node.
pub fn generate_splits(
    n: usize,
    ratios: [f64; 3],
    k: usize,
    seed: u64,
    stratify: Option<&[usize]>,
) -> Result<Vec<Split>> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || ratios.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be in [0, 1] and sum to at most 1")));
    }
    if k == 0 {
        return Err(Error::invalid("need at least one split"));
    }
    if let Some(labels) = stratify {
        if labels.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} nodes", labels.len())));
        }
    }
    let [a, b, c] = part_sizes(n, ratios);
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::invalid(format!("n = {n} is too small for nonempty {ratios:?} parts")));
    }

    let mut splits = Vec::with_capacity(k);
    for s in 0..k {
        let mut rng = rng_from_seed(crate::rng::derive_seed(seed, s as u64));
        let groups: Vec<Vec<usize>> = match stratify {
            None => vec![(0..n).collect()],
            Some(labels) => {
                let classes = labels.iter().max().map_or(0, |m| m + 1);
                let mut g = vec![Vec::new(); classes];
                for (i, &l) in labels.iter().enumerate() {
                    g[l].push(i);
                }
                g
            }
        };
        let mut split = Split { train: vec![false; n], val: vec![false; n], test: vec![false; n] };
        for mut nodes in groups {
            nodes.shuffle(&mut rng);
            let [ta, tb, tc] = part_sizes(nodes.len(), ratios);
            for (pos, &i) in nodes.iter().enumerate() {
                if pos < ta {
                    split.train[i] = true;
                } else if pos < ta + tb {
                    split.val[i] = true;
                } else if pos < ta + tb + tc {
                    split.test[i] = true;
                }
            }
        }
        let (tr, va, te) = split.sizes();
        if tr == 0 || va == 0 || te == 0 {
            return Err(Error::invalid("stratified split produced an empty part"));
        }
        splits.push(split);
    }
    Ok(splits)
}
