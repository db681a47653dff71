//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records primitive operations in execution order. Every primitive
//! stores what its backward rule needs; [`Tape::backward`] walks the record
//! once in reverse and accumulates `∂loss/∂leaf` into the leaves that require
//! gradients. Leaf gradients accumulate across backward calls until
//! [`Tape::zero_grad`].
//!
//! The tape borrows the graph for the lifetime of a forward pass so that the
//! Laplacian and the implicit diffusion solve can be replayed in backward.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::cg::{self, CgSettings};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{ParamId, ParamStore};
use crate::rng::DetRng;
use crate::tensor::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<'g> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Hadamard(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    HardTanh(Var, f64, f64),
    /// `x ⊙ mask` with a constant mask (dropout, node masks)
    Mask(Var, Rc<Matrix>),
    Gather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    SegmentSoftmax(Var, Rc<[usize]>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    ColDot(Var, Var),
    CrossEntropy { logits: Var, probs: Matrix, labels: Rc<[usize]>, rows: Rc<[usize]> },
    Mse { pred: Var, target: Rc<Matrix>, rows: Rc<[usize]> },
    Mae { pred: Var, target: Rc<Matrix>, rows: Rc<[usize]> },
    Laplacian(Var, &'g Graph),
    CgSolve { rhs: Var, kappa: Var, graph: &'g Graph, h: f64, settings: CgSettings },
    BatchNorm { x: Var, normalized: Matrix, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node<'g> {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op<'g>,
}

#[derive(Debug, Default)]
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
    params: HashMap<ParamId, Var>,
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op<'g>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers parameter `id` from `store` as a leaf. Repeated calls for the
    /// same id return the same handle, so shared parameters sum their
    /// gradients naturally.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    /// Adds the gradients of every registered parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.add_grad(id, g);
            }
        }
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> Error {
        let shapes: Vec<_> = vars.iter().map(|v| self.value(*v).shape()).collect();
        Error::shape(op, format!("operand shapes {shapes:?}"))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).same_shape(self.value(b)) {
            Ok(())
        } else {
            Err(self.shape_err(op, &[a, b]))
        }
    }

    fn row_operand(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let ca = self.value(a).cols();
        let (rr, cr) = self.value(row).shape();
        if rr == 1 && cr == ca {
            Ok(())
        } else {
            Err(self.shape_err(op, &[a, row]))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|_| self.shape_err("matmul", &[a, b]))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        let out = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// `a + 1·row`, broadcasting a 1×c row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand("add_row", a, row)?;
        let r = self.value(row).as_slice().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a ⊙ 1·row`, scaling column `c` of `a` by `row[c]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand("mul_row", a, row)?;
        let r = self.value(row).as_slice().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.value(a).hadamard(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Hadamard(a, b), rg))
    }

    /// Elementwise `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// ReLU with derivative 0 at the origin.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Clamp to `[lo, hi]`; the gradient passes only strictly inside.
    pub fn hardtanh(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo >= hi {
            return Err(Error::invalid(format!("hardtanh bounds lo={lo} >= hi={hi}")));
        }
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        Ok(self.push(out, Op::HardTanh(a, lo, hi), rg))
    }

    /// `x ⊙ mask` for a constant mask of the same shape.
    pub fn mask(&mut self, a: Var, mask: Rc<Matrix>) -> Result<Var> {
        if !self.value(a).same_shape(&mask) {
            return Err(Error::shape(
                "mask",
                format!("{:?} vs mask {:?}", self.value(a).shape(), mask.shape()),
            ));
        }
        let out = self.value(a).hadamard(&mask);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mask(a, mask), rg))
    }

    /// Inverted dropout: in training, zero each entry with probability `p`
    /// and scale survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut DetRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.value(a).shape();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..r * c).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        self.mask(a, Rc::new(Matrix::from_vec(r, c, mask)?))
    }

    /// Rows of `a` at `index` (one output row per index entry).
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let n = self.value(a).rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("row_gather", format!("index {bad} for {n} rows")));
        }
        let out = self.value(a).gather_rows(&index);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gather(a, index), rg))
    }

    /// `out[target[e]] += values[e]`, producing `n` rows.
    pub fn segment_sum(&mut self, values: Var, target: Rc<[usize]>, n: usize) -> Result<Var> {
        let v = self.value(values);
        if target.len() != v.rows() || target.iter().any(|&t| t >= n) {
            return Err(Error::shape(
                "segment_sum",
                format!("{} rows, {} targets, n = {n}", v.rows(), target.len()),
            ));
        }
        let mut out = Matrix::zeros(n, v.cols());
        for (e, &t) in target.iter().enumerate() {
            for (o, x) in out.row_mut(t).iter_mut().zip(v.row(e)) {
                *o += x;
            }
        }
        let rg = self.rg(values);
        Ok(self.push(out, Op::SegmentSum(values, target), rg))
    }

    /// Per-channel softmax over the rows that share a segment id.
    pub fn segment_softmax(&mut self, values: Var, segment: Rc<[usize]>, n: usize) -> Result<Var> {
        let v = self.value(values);
        if segment.len() != v.rows() || segment.iter().any(|&s| s >= n) {
            return Err(Error::shape(
                "segment_softmax",
                format!("{} rows, {} segment ids, n = {n}", v.rows(), segment.len()),
            ));
        }
        let c = v.cols();
        let mut max = Matrix::filled(n, c, f64::NEG_INFINITY);
        for (e, &s) in segment.iter().enumerate() {
            for (m, &x) in max.row_mut(s).iter_mut().zip(v.row(e)) {
                *m = m.max(x);
            }
        }
        let mut out = Matrix::zeros(v.rows(), c);
        let mut denom = Matrix::zeros(n, c);
        for (e, &s) in segment.iter().enumerate() {
            for k in 0..c {
                let ex = (v.get(e, k) - max.get(s, k)).exp();
                out.set(e, k, ex);
                denom.set(s, k, denom.get(s, k) + ex);
            }
        }
        for (e, &s) in segment.iter().enumerate() {
            for k in 0..c {
                out.set(e, k, out.get(e, k) / denom.get(s, k));
            }
        }
        let rg = self.rg(values);
        Ok(self.push(out, Op::SegmentSoftmax(values, segment), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Matrix::concat_cols(&mats)?;
        let rg = parts.iter().any(|v| self.rg(*v));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        if start >= end || end > cols {
            return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {cols} columns")));
        }
        let out = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Column-wise inner products, a 1×c row.
    pub fn col_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("col_dot", a, b)?;
        let out = Matrix::row_vector(&self.value(a).hadamard(self.value(b)).col_sums());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ColDot(a, b), rg))
    }

    /// Mean cross-entropy over the rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        if labels.len() != n || mask.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} logits rows, {} labels, {} mask entries", labels.len(), mask.len()),
            ));
        }
        let rows: Rc<[usize]> = (0..n).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::invalid("cross_entropy over an empty mask"));
        }
        if let Some(&i) = rows.iter().find(|&&i| labels[i] >= c) {
            return Err(Error::invalid(format!("label {} of node {i} >= {c} classes", labels[i])));
        }
        let mut probs = Matrix::zeros(n, c);
        let mut loss = 0.0;
        for &i in rows.iter() {
            let row = lv.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
            for k in 0..c {
                probs.set(i, k, (row[k] - lse).exp());
            }
        }
        loss /= rows.len() as f64;
        let rg = self.rg(logits);
        let labels: Rc<[usize]> = labels.into();
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, probs, labels, rows }, rg))
    }

    fn masked_rows(&self, op: &'static str, pred: Var, target: &Matrix, mask: Option<&[bool]>) -> Result<Rc<[usize]>> {
        let p = self.value(pred);
        if !p.same_shape(target) || mask.is_some_and(|m| m.len() != p.rows()) {
            return Err(Error::shape(op, format!("prediction {:?}, target {:?}", p.shape(), target.shape())));
        }
        let rows: Rc<[usize]> = match mask {
            Some(m) => (0..p.rows()).filter(|&i| m[i]).collect(),
            None => (0..p.rows()).collect(),
        };
        if rows.is_empty() || p.cols() == 0 {
            return Err(Error::invalid(format!("{op} over an empty mask")));
        }
        Ok(rows)
    }

    /// Mean squared error over masked rows and all columns.
    pub fn mse(&mut self, pred: Var, target: Rc<Matrix>, mask: Option<&[bool]>) -> Result<Var> {
        let rows = self.masked_rows("mse", pred, &target, mask)?;
        let p = self.value(pred);
        let count = (rows.len() * p.cols()) as f64;
        let loss: f64 = rows
            .iter()
            .flat_map(|&i| p.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b) * (a - b)))
            .sum::<f64>()
            / count;
        let rg = self.rg(pred);
        Ok(self.push(Matrix::scalar(loss), Op::Mse { pred, target, rows }, rg))
    }

    /// Mean absolute error over masked rows and all columns.
    pub fn mae(&mut self, pred: Var, target: Rc<Matrix>, mask: Option<&[bool]>) -> Result<Var> {
        let rows = self.masked_rows("mae", pred, &target, mask)?;
        let p = self.value(pred);
        let count = (rows.len() * p.cols()) as f64;
        let loss: f64 = rows
            .iter()
            .flat_map(|&i| p.row(i).iter().zip(target.row(i)).map(|(a, b)| (a - b).abs()))
            .sum::<f64>()
            / count;
        let rg = self.rg(pred);
        Ok(self.push(Matrix::scalar(loss), Op::Mae { pred, target, rows }, rg))
    }

    /// `L̂ a` on `graph`.
    pub fn laplacian(&mut self, a: Var, graph: &'g Graph) -> Result<Var> {
        let out = graph.laplacian_apply(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Laplacian(a, graph), rg))
    }

    /// Per-channel CG solve of `(I + h κ_c L̂) x_c = rhs_c` with `kappa` a 1×c
    /// row. Backward uses the implicit-function adjoint: one more solve with
    /// the same operator, no differentiation through the iterations.
    pub fn cg_solve(
        &mut self,
        graph: &'g Graph,
        rhs: Var,
        kappa: Var,
        h: f64,
        settings: CgSettings,
    ) -> Result<Var> {
        let k = self.value(kappa);
        if k.rows() != 1 {
            return Err(self.shape_err("cg_solve", &[rhs, kappa]));
        }
        let out = cg::cg_solve(graph, self.value(rhs), k.as_slice(), h, settings)?;
        let rg = self.rg(rhs) || self.rg(kappa);
        Ok(self.push(out, Op::CgSolve { rhs, kappa, graph, h, settings }, rg))
    }

    /// Per-column standardization with batch statistics (biased variance).
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let v = self.value(x);
        let (n, c) = v.shape();
        if n == 0 {
            return Err(Error::invalid("batch_norm over zero rows"));
        }
        let mean: Vec<f64> = v.col_sums().iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (k, x) in v.row(i).iter().enumerate() {
                var[k] += (x - mean[k]) * (x - mean[k]);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut normalized = v.clone();
        for i in 0..n {
            for (k, o) in normalized.row_mut(i).iter_mut().enumerate() {
                *o = (*o - mean[k]) * inv_std[k];
            }
        }
        let rg = self.rg(x);
        let out = self.push(normalized.clone(), Op::BatchNorm { x, normalized, inv_std }, rg);
        Ok((out, mean, var))
    }

    /// Backpropagates from the scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => acc.add_assign(&contrib),
                None => grads[v.0] = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul_nt(val(*b))?);
                }
                if self.rg(*b) {
                    send(*b, val(*a).matmul_tn(g)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                send(*row, Matrix::row_vector(&g.col_sums()));
            }
            Op::MulRow(a, row) => {
                let r = val(*row).as_slice();
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (o, s) in ga.row_mut(i).iter_mut().zip(r) {
                            *o *= s;
                        }
                    }
                    send(*a, ga);
                }
                if self.rg(*row) {
                    send(*row, Matrix::row_vector(&g.hadamard(val(*a)).col_sums()));
                }
            }
            Op::Hadamard(a, b) => {
                send(*a, g.hadamard(val(*b)));
                send(*b, g.hadamard(val(*a)));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.zip_map(bv, |gi, y| gi / y));
                if self.rg(*b) {
                    let mut gb = g.hadamard(av);
                    for (o, y) in gb.as_mut_slice().iter_mut().zip(bv.as_slice()) {
                        *o = -*o / (y * y);
                    }
                    send(*b, gb);
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
            Op::HardTanh(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(*a, g.zip_map(val(*a), |gi, x| if x > lo && x < hi { gi } else { 0.0 }));
            }
            Op::Mask(a, m) => send(*a, g.hadamard(m)),
            Op::Gather(a, index) => {
                let src = val(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (k, &i) in index.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                send(*a, ga);
            }
            Op::SegmentSum(a, target) => send(*a, g.gather_rows(target)),
            Op::SegmentSoftmax(a, segment) => {
                let y = &node.value;
                let c = y.cols();
                let n = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = Matrix::zeros(n, c);
                for (e, &s) in segment.iter().enumerate() {
                    for k in 0..c {
                        dots.set(s, k, dots.get(s, k) + g.get(e, k) * y.get(e, k));
                    }
                }
                let mut ga = Matrix::zeros(y.rows(), c);
                for (e, &s) in segment.iter().enumerate() {
                    for k in 0..c {
                        ga.set(e, k, y.get(e, k) * (g.get(e, k) - dots.get(s, k)));
                    }
                }
                send(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.rg(*p) {
                        send(*p, g.slice_cols(off, off + w));
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for i in 0..ga.rows() {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                send(*a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Matrix::filled(r, c, g.item()));
            }
            Op::ColDot(a, b) => {
                let gr = g.as_slice();
                let spread = |m: &Matrix| {
                    let mut out = m.clone();
                    for i in 0..out.rows() {
                        for (o, s) in out.row_mut(i).iter_mut().zip(gr) {
                            *o *= s;
                        }
                    }
                    out
                };
                if self.rg(*a) {
                    send(*a, spread(val(*b)));
                }
                if self.rg(*b) {
                    send(*b, spread(val(*a)));
                }
            }
            Op::CrossEntropy { logits, probs, labels, rows } => {
                let scale = g.item() / rows.len() as f64;
                let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                for &i in rows.iter() {
                    for k in 0..probs.cols() {
                        let onehot = if k == labels[i] { 1.0 } else { 0.0 };
                        gl.set(i, k, scale * (probs.get(i, k) - onehot));
                    }
                }
                send(*logits, gl);
            }
            Op::Mse { pred, target, rows } => {
                let p = val(*pred);
                let scale = 2.0 * g.item() / (rows.len() * p.cols()) as f64;
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                for &i in rows.iter() {
                    for k in 0..p.cols() {
                        gp.set(i, k, scale * (p.get(i, k) - target.get(i, k)));
                    }
                }
                send(*pred, gp);
            }
            Op::Mae { pred, target, rows } => {
                let p = val(*pred);
                let scale = g.item() / (rows.len() * p.cols()) as f64;
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                for &i in rows.iter() {
                    for k in 0..p.cols() {
                        let d = p.get(i, k) - target.get(i, k);
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gp.set(i, k, scale * s);
                    }
                }
                send(*pred, gp);
            }
            Op::Laplacian(a, graph) => send(*a, graph.laplacian_apply(g)?),
            Op::CgSolve { rhs, kappa, graph, h, settings } => {
                let k = val(*kappa).as_slice();
                // A is self-adjoint, so the adjoint system reuses the same operator.
                let adjoint = cg::cg_solve(graph, g, k, *h, *settings)?;
                if self.rg(*kappa) {
                    let lx = graph.laplacian_apply(&node.value)?;
                    let gk: Vec<f64> = adjoint
                        .hadamard(&lx)
                        .col_sums()
                        .iter()
                        .map(|d| -h * d)
                        .collect();
                    send(*kappa, Matrix::row_vector(&gk));
                }
                send(*rhs, adjoint);
            }
            Op::BatchNorm { x, normalized, inv_std } => {
                let (n, c) = normalized.shape();
                let nf = n as f64;
                let sum_g = g.col_sums();
                let sum_gx = g.hadamard(normalized).col_sums();
                let mut gx = Matrix::zeros(n, c);
                for i in 0..n {
                    for k in 0..c {
                        let v = inv_std[k] / nf
                            * (nf * g.get(i, k) - sum_g[k] - normalized.get(i, k) * sum_gx[k]);
                        gx.set(i, k, v);
                    }
                }
                send(*x, gx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn relu_backward_uses_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::row_vector(&[-1.0, 2.0]));
        let y = t.relu(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().as_slice(), &[0.0, 1.0]);

        let mut t = Tape::new();
        let x = t.variable(Matrix::row_vector(&[0.0]));
        let y = t.relu(x);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn uniform_segment_softmax() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::zeros(3, 1));
        let y = t.segment_softmax(x, Rc::from(vec![0, 0, 0]), 1).unwrap();
        for &v in t.value(y).as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::scalar(3.0));
        let y = t.hadamard(x, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn repeated_backward_accumulates_until_zero_grad() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::scalar(3.0));
        let y = t.hadamard(x, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 12.0);
        t.zero_grad();
        assert_eq!(t.grad(x).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::Shape { op: "backward", .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::scalar(2.0));
        let x = t.variable(Matrix::scalar(5.0));
        let y = t.hadamard(a, x).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(a).is_none());
        assert_eq!(t.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut t = Tape::new();
        let a = t.variable(Matrix::zeros(2, 3));
        let b = t.variable(Matrix::zeros(2, 2));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("(2, 3)") && err.contains("(2, 2)"), "{err}");
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn dropout_validation_and_modes() {
        let mut rng = rng_from_seed(1);
        let mut t = Tape::new();
        let x = t.variable(Matrix::filled(50, 4, 1.0));
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(t.dropout(x, -0.1, true, &mut rng).is_err());
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        assert!(t.value(y).as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn hardtanh_rejects_inverted_bounds() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::scalar(0.5));
        assert!(t.hardtanh(x, 1.0, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::zeros(4, 7));
        let l = t.cross_entropy(x, &[0, 1, 2, 3], &[true; 4]).unwrap();
        assert!((t.value(l).item() - 7f64.ln()).abs() < 1e-12);
        assert!(t.cross_entropy(x, &[0, 1, 2, 3], &[false; 4]).is_err());
    }
}
