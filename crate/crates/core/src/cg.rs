//! Conjugate gradients for the per-channel implicit diffusion systems
//! `(I + h κ_c L̂) x_c = b_c`.
//!
//! The Kronecker system `I + h K ⊗ L̂` block-decouples because `K` is diagonal,
//! so each channel is solved on its own and the Kronecker matrix never exists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgSettings {
    /// Fixed iteration budget; CG always starts from zero.
    pub iterations: usize,
    /// Early exit once `||r|| <= tol * ||b||`. `None` runs every iteration.
    pub tol: Option<f64>,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self { iterations: 5, tol: Some(1e-10) }
    }
}

impl CgSettings {
    pub fn converged(tol: f64) -> Self {
        Self { iterations: 10_000, tol: Some(tol) }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::invalid("cg_solve needs at least one iteration"));
        }
        Ok(())
    }
}

/// Solves `(I + h κ_c L̂) x = b` for one channel.
pub fn cg_channel(
    graph: &Graph,
    rhs: &[f64],
    kappa: f64,
    h: f64,
    settings: CgSettings,
) -> Result<(Vec<f64>, usize)> {
    settings.validate()?;
    let n = rhs.len();
    let mut x = vec![0.0; n];
    if kappa == 0.0 {
        x.copy_from_slice(rhs);
        return Ok((x, 0));
    }
    let hk = h * kappa;
    let apply = |v: &[f64], out: &mut [f64]| {
        graph.laplacian_apply_vec(v, out);
        for (o, &vi) in out.iter_mut().zip(v) {
            *o = vi + hk * *o;
        }
    };

    let b_norm = dot(rhs, rhs).sqrt();
    if b_norm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rs = dot(&r, &r);
    let mut done = 0;
    for it in 0..settings.iterations {
        apply(&p, &mut ap);
        let p_ap = dot(&p, &ap);
        let alpha = rs / p_ap;
        if !alpha.is_finite() {
            return Err(Error::NonFinite(format!("cg_solve step length at iteration {it}")));
        }
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        done = it + 1;
        if !rs_new.is_finite() {
            return Err(Error::NonFinite(format!("cg_solve residual at iteration {it}")));
        }
        if let Some(tol) = settings.tol {
            if rs_new.sqrt() <= tol * b_norm {
                break;
            }
        }
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    Ok((x, done))
}

/// Column-wise solve of `(I + h κ_c L̂) X_c = B_c`.
pub fn cg_solve(
    graph: &Graph,
    rhs: &Matrix,
    kappa: &[f64],
    h: f64,
    settings: CgSettings,
) -> Result<Matrix> {
    if rhs.rows() != graph.n_nodes() || rhs.cols() != kappa.len() {
        return Err(Error::shape(
            "cg_solve",
            format!("rhs {:?}, {} coefficients, {} nodes", rhs.shape(), kappa.len(), graph.n_nodes()),
        ));
    }
    if h <= 0.0 {
        return Err(Error::invalid(format!("cg_solve step size must be positive, got {h}")));
    }
    if !rhs.all_finite() {
        return Err(Error::NonFinite("cg_solve right-hand side".into()));
    }
    let mut out = Matrix::zeros(rhs.rows(), rhs.cols());
    for (c, &k) in kappa.iter().enumerate() {
        let (x, _) = cg_channel(graph, &rhs.col_to_vec(c), k, h, settings)?;
        out.set_col(c, &x);
    }
    Ok(out)
}

/// The same solve recorded iteration by iteration from tape primitives, so
/// backward differentiates through every CG step. Much slower than
/// [`Tape::cg_solve`]; used to cross-check the implicit adjoint.
pub fn cg_solve_unrolled<'g>(
    tape: &mut Tape<'g>,
    graph: &'g Graph,
    rhs: Var,
    kappa: Var,
    h: f64,
    settings: CgSettings,
) -> Result<Var> {
    settings.validate()?;
    let (n, c) = tape.value(rhs).shape();
    if n != graph.n_nodes() || tape.value(kappa).shape() != (1, c) {
        return Err(Error::shape(
            "cg_solve_unrolled",
            format!("rhs {:?}, kappa {:?}, {} nodes", (n, c), tape.value(kappa).shape(), graph.n_nodes()),
        ));
    }
    let mut columns = Vec::with_capacity(c);
    for k in 0..c {
        let b = tape.slice_cols(rhs, k, k + 1)?;
        let kap = tape.slice_cols(kappa, k, k + 1)?;
        let b_norm = tape.value(b).frobenius_norm();
        if b_norm == 0.0 {
            columns.push(b);
            continue;
        }
        let hk = tape.scale(kap, h);
        let mut x: Option<Var> = None;
        let mut r = b;
        let mut p = b;
        let mut rs = tape.col_dot(r, r)?;
        for _ in 0..settings.iterations {
            let lp = tape.laplacian(p, graph)?;
            let scaled = tape.mul_row(lp, hk)?;
            let ap = tape.add(p, scaled)?;
            let pap = tape.col_dot(p, ap)?;
            let alpha = tape.div(rs, pap)?;
            let step = tape.mul_row(p, alpha)?;
            x = Some(match x {
                Some(x) => tape.add(x, step)?,
                None => step,
            });
            let dr = tape.mul_row(ap, alpha)?;
            r = tape.sub(r, dr)?;
            let rs_new = tape.col_dot(r, r)?;
            let res = tape.value(rs_new).item().sqrt();
            if !res.is_finite() {
                return Err(Error::NonFinite("cg_solve_unrolled residual".into()));
            }
            if settings.tol.is_some_and(|tol| res <= tol * b_norm) {
                break;
            }
            let beta = tape.div(rs_new, rs)?;
            let carried = tape.mul_row(p, beta)?;
            p = tape.add(r, carried)?;
            rs = rs_new;
        }
        columns.push(x.expect("at least one iteration"));
    }
    tape.concat_cols(&columns)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
