//! Immutable symmetric graphs in compressed-row form.
//!
//! Every undirected edge is stored as two directed edges. Edge `e` runs from
//! `source(e)` to `target(e)`; edges are sorted by source, then target, and
//! `reverse(e)` is the index of the opposite orientation. Edge-indexed arrays
//! elsewhere in the crate (velocities, gathered features) follow this order.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    targets: Vec<usize>,
    reverse: Vec<usize>,
    inv_sqrt_degree: Vec<f64>,
}

impl Graph {
    /// Builds a graph from `(src, dst)` pairs. Self-loops and duplicates are
    /// dropped. Without `symmetrize`, an edge whose reverse is missing is an
    /// error.
    pub fn build(edges: &[(usize, usize)], n_nodes: usize, symmetrize: bool) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::invalid("graph needs at least one node"));
        }
        let mut directed = Vec::with_capacity(edges.len() * if symmetrize { 2 } else { 1 });
        for &(s, t) in edges {
            if s >= n_nodes || t >= n_nodes {
                return Err(Error::EdgeOutOfRange { src: s, dst: t, n_nodes });
            }
            if s == t {
                continue;
            }
            directed.push((s, t));
            if symmetrize {
                directed.push((t, s));
            }
        }
        directed.sort_unstable();
        directed.dedup();

        let mut offsets = vec![0usize; n_nodes + 1];
        for &(s, _) in &directed {
            offsets[s + 1] += 1;
        }
        for i in 0..n_nodes {
            offsets[i + 1] += offsets[i];
        }
        let sources: Vec<usize> = directed.iter().map(|e| e.0).collect();
        let targets: Vec<usize> = directed.iter().map(|e| e.1).collect();

        let mut reverse = Vec::with_capacity(directed.len());
        for &(s, t) in &directed {
            let row = &targets[offsets[t]..offsets[t + 1]];
            match row.binary_search(&s) {
                Ok(k) => reverse.push(offsets[t] + k),
                Err(_) => return Err(Error::AsymmetricEdges { src: s, dst: t }),
            }
        }

        let inv_sqrt_degree = (0..n_nodes)
            .map(|i| {
                let d = offsets[i + 1] - offsets[i];
                if d == 0 {
                    0.0
                } else {
                    1.0 / (d as f64).sqrt()
                }
            })
            .collect();

        Ok(Self { n_nodes, offsets, sources, targets, reverse, inv_sqrt_degree })
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Number of directed edges (twice the undirected count).
    #[inline]
    pub fn n_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn n_undirected_edges(&self) -> usize {
        self.targets.len() / 2
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_nodes).map(|i| self.degree(i)).collect()
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes).filter(|&i| self.degree(i) == 0).collect()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Index range of the outbound edges of node `i`.
    pub fn out_edges(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    #[inline]
    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    #[inline]
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    #[inline]
    pub fn reverse_index(&self) -> &[usize] {
        &self.reverse
    }

    pub fn edge_index(&self, s: usize, t: usize) -> Option<usize> {
        self.neighbors(s).binary_search(&t).ok().map(|k| self.offsets[s] + k)
    }

    pub fn directed_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sources.iter().copied().zip(self.targets.iter().copied())
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.directed_edges().filter(|(s, t)| s < t).collect()
    }

    pub fn inv_sqrt_degree(&self) -> &[f64] {
        &self.inv_sqrt_degree
    }

    fn check_rows(&self, op: &'static str, u: &Matrix) -> Result<()> {
        if u.rows() != self.n_nodes {
            return Err(Error::shape(
                op,
                format!("{} rows for a graph with {} nodes", u.rows(), self.n_nodes),
            ));
        }
        Ok(())
    }

    /// `L̂u` with `L̂ = D^{-1/2}(D - A)D^{-1/2}`. Isolated nodes have a zero
    /// `D^{-1/2}` entry, so their rows of `L̂` vanish.
    pub fn laplacian_apply(&self, u: &Matrix) -> Result<Matrix> {
        self.check_rows("laplacian_apply", u)?;
        let c = u.cols();
        let mut out = Matrix::zeros(self.n_nodes, c);
        for i in 0..self.n_nodes {
            let di = self.inv_sqrt_degree[i];
            if di == 0.0 {
                continue;
            }
            let out_row = out.row_mut(i);
            out_row.copy_from_slice(u.row(i));
            for &j in self.neighbors(i) {
                let w = di * self.inv_sqrt_degree[j];
                for (o, &v) in out_row.iter_mut().zip(u.row(j)) {
                    *o -= w * v;
                }
            }
        }
        Ok(out)
    }

    /// Single-channel `L̂x`.
    pub fn laplacian_apply_vec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n_nodes {
            let di = self.inv_sqrt_degree[i];
            if di == 0.0 {
                out[i] = 0.0;
                continue;
            }
            let mut acc = x[i];
            for &j in self.neighbors(i) {
                acc -= di * self.inv_sqrt_degree[j] * x[j];
            }
            out[i] = acc;
        }
    }

    /// `E(U) = (1/n) Σ_i Σ_{j∈N_i} ||U_i - U_j||²`; each undirected pair
    /// contributes twice.
    pub fn dirichlet_energy(&self, u: &Matrix) -> Result<f64> {
        self.check_rows("dirichlet_energy", u)?;
        let mut acc = 0.0;
        for (s, t) in self.directed_edges() {
            acc += u.row(s).iter().zip(u.row(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(acc / self.n_nodes as f64)
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.n_nodes {
            return Err(Error::shape("Graph::permuted", "permutation length"));
        }
        let edges: Vec<_> = self.directed_edges().map(|(s, t)| (perm[s], perm[t])).collect();
        Graph::build(&edges, self.n_nodes, false)
    }

    /// Breadth-first hop distances from `start`; `None` for unreachable nodes.
    pub fn hop_distances(&self, start: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_nodes];
        dist[start] = Some(0);
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let d = dist[i].unwrap_or(0);
            for &j in self.neighbors(i) {
                if dist[j].is_none() {
                    dist[j] = Some(d + 1);
                    queue.push_back(j);
                }
            }
        }
        dist
    }

    /// Dense adjacency matrix; test and study support only.
    pub fn dense_adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.n_nodes, self.n_nodes);
        for (s, t) in self.directed_edges() {
            a.set(s, t, 1.0);
        }
        a
    }
}

/// Per-layer Dirichlet energies and their ratio to the first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub per_layer_energy: Vec<f64>,
    pub relative_energy: Vec<f64>,
}

impl EnergyReport {
    pub fn from_energies(per_layer_energy: Vec<f64>) -> Self {
        let base = per_layer_energy.first().copied().unwrap_or(0.0);
        let relative_energy = per_layer_energy
            .iter()
            .map(|&e| if base > 0.0 { e / base } else { 0.0 })
            .collect();
        Self { per_layer_energy, relative_energy }
    }

    pub fn measure(graph: &Graph, stages: &[Matrix]) -> Result<Self> {
        let energies = stages.iter().map(|u| graph.dirichlet_energy(u)).collect::<Result<_>>()?;
        Ok(Self::from_energies(energies))
    }
}

/// G(n, p): every unordered pair is included independently with probability
/// `p`, then both orientations are stored.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::invalid(format!("edge probability {p} outside [0, 1]")));
    }
    let mut rng = rng_from_seed(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::build(&edges, n, true)
}
