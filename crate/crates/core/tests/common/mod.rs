#![allow(dead_code)]

use adrgnn::rng::{rng_from_seed, uniform, DetRng};
use adrgnn::{erdos_renyi, Graph, Matrix};
use nalgebra::DMatrix;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut DetRng) -> Matrix {
    let data = (0..rows * cols).map(|_| uniform(rng, -1.0, 1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn positive_matrix(rows: usize, cols: usize, rng: &mut DetRng) -> Matrix {
    let data = (0..rows * cols).map(|_| uniform(rng, 0.0, 1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Erdős–Rényi graph with at least one edge.
pub fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
    let mut s = seed;
    loop {
        let g = erdos_renyi(n, p, s).unwrap();
        if g.n_edges() > 0 {
            return g;
        }
        s = s.wrapping_add(1_000_003);
    }
}

pub fn rng(seed: u64) -> DetRng {
    rng_from_seed(seed)
}

/// Dense `D^{-1/2}(D − A)D^{-1/2}` assembled from the undirected edge list,
/// with zero rows and columns for isolated nodes.
pub fn dense_laplacian(g: &Graph) -> DMatrix<f64> {
    let n = g.n_nodes();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, j) in g.undirected_edges() {
        a[(i, j)] = 1.0;
        a[(j, i)] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if deg[i] == 0.0 || deg[j] == 0.0 {
                continue;
            }
            let lap = if i == j { deg[i] } else { 0.0 } - a[(i, j)];
            l[(i, j)] = lap / (deg[i] * deg[j]).sqrt();
        }
    }
    l
}

pub fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Matrix {
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.set(i, j, m[(i, j)]);
        }
    }
    out
}

/// `(1/n) Σ_i Σ_j A_ij ||U_i − U_j||²` from a dense adjacency.
pub fn dense_dirichlet_energy(g: &Graph, u: &Matrix) -> f64 {
    let n = g.n_nodes();
    let mut a = vec![vec![0.0; n]; n];
    for (i, j) in g.undirected_edges() {
        a[i][j] = 1.0;
        a[j][i] = 1.0;
    }
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..u.cols() {
                let d = u.get(i, k) - u.get(j, k);
                e += a[i][j] * d * d;
            }
        }
    }
    e / n as f64
}
