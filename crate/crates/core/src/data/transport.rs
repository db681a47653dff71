//! The synthetic mass-transport task: unit mass spread over a few source
//! nodes must end up concentrated on one destination node.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::{erdos_renyi, Graph};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Matrix;

pub const MAX_RETRIES: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct TransportTask {
    pub graph: Graph,
    /// `n × 1`, `1 / |sources|` on each source node.
    pub source_features: Matrix,
    /// `n × 1`, one on the destination.
    pub target_features: Matrix,
    pub source_set: Vec<usize>,
    pub destination: usize,
    /// Seed of the accepted graph draw (`seed + retries`).
    pub graph_seed: u64,
}

/// Draws `G(n, p)` graphs with seeds `seed, seed + 1, ...` until every
/// sampled source can reach the sampled destination.
pub fn make_transport_task(n: usize, p: f64, n_sources: usize, seed: u64) -> Result<TransportTask> {
    if n_sources == 0 || n_sources >= n {
        return Err(Error::invalid(format!("need 1 <= sources < n, got {n_sources} sources for n = {n}")));
    }
    for attempt in 0..MAX_RETRIES {
        let graph_seed = seed.wrapping_add(attempt);
        let graph = erdos_renyi(n, p, graph_seed)?;
        let mut rng = rng_from_seed(derive_seed(graph_seed, 0x7472_616e));
        let mut nodes: Vec<usize> = (0..n).collect();
        nodes.shuffle(&mut rng);
        let destination = nodes[0];
        let mut source_set = nodes[1..=n_sources].to_vec();
        source_set.sort_unstable();
        let dist = graph.hop_distances(destination);
        if source_set.iter().any(|&s| dist[s].is_none()) {
            continue;
        }
        let mut source_features = Matrix::zeros(n, 1);
        for &s in &source_set {
            source_features.set(s, 0, 1.0 / n_sources as f64);
        }
        let mut target_features = Matrix::zeros(n, 1);
        target_features.set(destination, 0, 1.0);
        return Ok(TransportTask { graph, source_features, target_features, source_set, destination, graph_seed });
    }
    Err(Error::invalid(format!(
        "no connected transport task after {MAX_RETRIES} draws of G({n}, {p}); try a larger p"
    )))
}
