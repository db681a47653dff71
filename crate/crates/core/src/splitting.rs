//! Error of operator splitting on linear dynamics `du/dt = (A + D + R) u`.
//!
//! The exact flow over one step is `exp(dt (A + D + R))`; the split flow is
//! `exp(dt R) exp(dt D) exp(dt A)`. For non-commuting terms the one-step
//! discrepancy shrinks like `dt²`, so halving `dt` divides it by about four.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, DetRng};
use crate::tensor::Matrix;

pub const MAX_DENSE: usize = 50;

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("expm", format!("{:?} is not square", a.shape())));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("expm input".into()));
    }
    // scale so that the 1-norm is at most 1/2
    let norm = (0..n).map(|j| (0..n).map(|i| a.get(i, j).abs()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = a.scale(0.5f64.powi(squarings as i32));

    let mut result = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=30 {
        term = term.matmul(&scaled)?.scale(1.0 / k as f64);
        result.add_assign(&term);
        if term.max_abs() <= f64::EPSILON * result.max_abs() * 1e-2 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    Ok(result)
}

fn check_square(name: &str, m: &Matrix, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::shape("splitting_error", format!("{name} is {:?}, expected {n}x{n}", m.shape())));
    }
    Ok(())
}

/// `||exp(dt(A+D+R)) u − exp(dt R) exp(dt D) exp(dt A) u||₂`.
pub fn splitting_error(a: &Matrix, d: &Matrix, r: &Matrix, dt: f64, u: &[f64]) -> Result<f64> {
    let n = u.len();
    if n > MAX_DENSE {
        return Err(Error::DenseLimit { n, limit: MAX_DENSE });
    }
    check_square("A", a, n)?;
    check_square("D", d, n)?;
    check_square("R", r, n)?;
    let u = Matrix::column(u);
    let exact = expm(&a.add(d).add(r).scale(dt))?.matmul(&u)?;
    let mut split = expm(&a.scale(dt))?.matmul(&u)?;
    split = expm(&d.scale(dt))?.matmul(&split)?;
    split = expm(&r.scale(dt))?.matmul(&split)?;
    Ok(exact.sub(&split).frobenius_norm())
}

#[derive(Clone, Debug, Serialize)]
pub struct SplittingTrial {
    pub trial: usize,
    pub dt: f64,
    pub error: f64,
    pub error_half: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SplittingStudy {
    pub n: usize,
    pub trials: Vec<SplittingTrial>,
    pub mean_ratio: f64,
}

fn gaussian_matrix(n: usize, rng: &mut DetRng) -> Matrix {
    let data = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(n, n, data).expect("sized above")
}

/// Gaussian `A`, `D`, `R` and start vector of one trial.
fn random_triple(n: usize, seed: u64, trial: usize) -> (Matrix, Matrix, Matrix, Vec<f64>) {
    let mut rng = rng_from_seed(derive_seed(seed, trial as u64));
    let a = gaussian_matrix(n, &mut rng);
    let d = gaussian_matrix(n, &mut rng);
    let r = gaussian_matrix(n, &mut rng);
    let u = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (a, d, r, u)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub trial: usize,
    pub dt: f64,
    pub discrepancy: f64,
}

/// Splitting discrepancy of the same random triples over several step sizes.
pub fn splitting_sweep(n: usize, dts: &[f64], trials: usize, seed: u64) -> Result<Vec<SweepPoint>> {
    if trials == 0 || dts.is_empty() || dts.iter().any(|&dt| !(dt > 0.0)) {
        return Err(Error::invalid("splitting sweep needs at least one trial and positive step sizes"));
    }
    let mut out = Vec::with_capacity(trials * dts.len());
    for trial in 0..trials {
        let (a, d, r, u) = random_triple(n, seed, trial);
        for &dt in dts {
            out.push(SweepPoint { trial, dt, discrepancy: splitting_error(&a, &d, &r, dt, &u)? });
        }
    }
    Ok(out)
}

/// Random Gaussian triples of size `n`; each trial reports
/// `error(dt) / error(dt / 2)`.
pub fn splitting_ratio_study(n: usize, dt: f64, trials: usize, seed: u64) -> Result<SplittingStudy> {
    if trials == 0 || dt <= 0.0 {
        return Err(Error::invalid("splitting study needs at least one trial and dt > 0"));
    }
    let mut rows = Vec::with_capacity(trials);
    for trial in 0..trials {
        let (a, d, r, u) = random_triple(n, seed, trial);
        let error = splitting_error(&a, &d, &r, dt, &u)?;
        let error_half = splitting_error(&a, &d, &r, dt / 2.0, &u)?;
        rows.push(SplittingTrial { trial, dt, error, error_half, ratio: error / error_half });
    }
    let mean_ratio = rows.iter().map(|t| t.ratio).sum::<f64>() / trials as f64;
    Ok(SplittingStudy { n, trials: rows, mean_ratio })
}
