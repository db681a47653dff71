//! Central finite-difference checks for tape gradients.

use std::rc::Rc;

use serde::Serialize;

use crate::adr::{self, AdrLayerParams, Ctx, LayerConfig};
use crate::cg::CgSettings;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{time_embedding_matrix, AdrGnnStatic, AdrGnnTemporal, StaticConfig, TemporalConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_seed, rng_from_seed, uniform, DetRng};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// `||a − b||₂ / max(||a||₂, ||b||₂)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_error: f64,
}

impl GradCheck {
    fn new(name: String, analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let relative_error = relative_error(&analytic, &numeric);
        Self { name, analytic, numeric, relative_error }
    }
}

fn scalar_loss(tape: &Tape<'_>, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if v.shape() != (1, 1) {
        return Err(Error::shape("gradcheck", format!("loss has shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` with respect to every entry of
/// every input against central differences with step `eps`. `f` receives a
/// fresh tape and one variable per input and returns a scalar loss.
pub fn check_inputs<'g, F>(inputs: &[Matrix], eps: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape<'g>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.variable(m.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        scalar_loss(&tape, loss)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.variable(m.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    scalar_loss(&tape, loss)?;
    tape.backward(loss)?;

    let mut out = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = match tape.grad(*var) {
            Some(g) => g.as_slice().to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for idx in 0..inputs[k].len() {
            let orig = work[k].as_slice()[idx];
            work[k].as_mut_slice()[idx] = orig + eps;
            let plus = eval(&work)?;
            work[k].as_mut_slice()[idx] = orig - eps;
            let minus = eval(&work)?;
            work[k].as_mut_slice()[idx] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        out.push(GradCheck::new(format!("input{k}"), analytic, numeric));
    }
    Ok(out)
}

/// Like [`check_inputs`] but over the trainable parameters of `store`. At most
/// `max_entries` entries per parameter are perturbed (evenly strided); the
/// forward closure must be deterministic.
pub fn check_params<'g, F>(store: &mut ParamStore, eps: f64, max_entries: usize, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape<'g>, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        scalar_loss(&tape, loss)?;
        tape.backward(loss)?;
        tape.accumulate_param_grads(store);
    }
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.value(id).len();
        let stride = len.div_ceil(max_entries.max(1)).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for idx in (0..len).step_by(stride) {
            analytic.push(store.grad(id).as_slice()[idx]);
            let orig = store.value(id).as_slice()[idx];
            store.value_mut(id).as_mut_slice()[idx] = orig + eps;
            let plus = {
                let mut tape = Tape::new();
                let loss = f(&mut tape, store)?;
                scalar_loss(&tape, loss)?
            };
            store.value_mut(id).as_mut_slice()[idx] = orig - eps;
            let minus = {
                let mut tape = Tape::new();
                let loss = f(&mut tape, store)?;
                scalar_loss(&tape, loss)?
            };
            store.value_mut(id).as_mut_slice()[idx] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        out.push(GradCheck::new(store.get(id).name.clone(), analytic, numeric));
    }
    store.zero_grad();
    Ok(out)
}

/// Relative error over all checks concatenated.
pub fn overall_error(checks: &[GradCheck]) -> f64 {
    let a: Vec<f64> = checks.iter().flat_map(|c| c.analytic.iter().copied()).collect();
    let n: Vec<f64> = checks.iter().flat_map(|c| c.numeric.iter().copied()).collect();
    relative_error(&a, &n)
}

/// One entry of [`fixture_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub relative_error: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.relative_error <= self.tolerance
    }
}

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut DetRng) -> Matrix {
    let data = (0..rows * cols).map(|_| uniform(rng, lo, hi)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// `Σ out ⊙ W` for a fixed random `W`.
fn project(t: &mut Tape<'_>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.value(out).shape();
    let w = t.constant(random(r, c, -1.0, 1.0, &mut rng_from_seed(seed)));
    let p = t.hadamard(out, w)?;
    Ok(t.sum(p))
}

#[allow(clippy::too_many_arguments)]
fn layer_output<'g>(
    t: &mut Tape<'g>,
    g: &'g Graph,
    store: &ParamStore,
    params: &AdrLayerParams,
    cfg: &LayerConfig,
    u: Var,
    u0: Var,
    seed: u64,
) -> Result<Var> {
    let mut dr = rng_from_seed(0);
    let mut ctx = Ctx::new(true, &mut dr);
    let st = adr::adr_layer(t, store, g, u, u0, u, params, cfg, &mut ctx)?;
    project(t, st.output, seed)
}

/// Gradient checks on fixed-seed fixtures: tape primitives, the conjugate
/// gradient solve with its implicit adjoint, a full layer, and the static
/// and temporal models.
pub fn fixture_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut r = rng_from_seed(seed);
    let ps = derive_seed(seed, 1);
    let mut push = |name: &str, checks: Vec<GradCheck>, tolerance: f64| {
        out.push(SuiteEntry { name: name.into(), relative_error: overall_error(&checks), tolerance });
    };

    let a = random(5, 3, -1.0, 1.0, &mut r);
    let b = random(5, 3, -1.0, 1.0, &mut r);
    let w = random(3, 4, -1.0, 1.0, &mut r);
    let pos = random(5, 3, 0.5, 1.5, &mut r);
    let tol = PRIMITIVE_TOLERANCE;
    push("matmul", check_inputs(&[a.clone(), w], DEFAULT_STEP, |t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, ps)
    })?, tol);
    push("hadamard", check_inputs(&[a.clone(), b.clone()], DEFAULT_STEP, |t, v| {
        let o = t.hadamard(v[0], v[1])?;
        project(t, o, ps)
    })?, tol);
    push("div", check_inputs(&[a.clone(), pos], DEFAULT_STEP, |t, v| {
        let o = t.div(v[0], v[1])?;
        project(t, o, ps)
    })?, tol);
    push("relu", check_inputs(std::slice::from_ref(&a), DEFAULT_STEP, |t, v| {
        let o = t.relu(v[0]);
        project(t, o, ps)
    })?, tol);
    push("tanh", check_inputs(std::slice::from_ref(&a), DEFAULT_STEP, |t, v| {
        let o = t.tanh(v[0]);
        project(t, o, ps)
    })?, tol);
    push("hardtanh", check_inputs(&[a.scale(1.5)], DEFAULT_STEP, |t, v| {
        let o = t.hardtanh(v[0], -0.4, 0.6)?;
        project(t, o, ps)
    })?, tol);
    push("batch_norm", check_inputs(std::slice::from_ref(&a), DEFAULT_STEP, |t, v| {
        let (o, _, _) = t.batch_norm(v[0], 1e-5)?;
        project(t, o, ps)
    })?, tol);

    let edges = random(9, 3, -2.0, 2.0, &mut r);
    let index: Rc<[usize]> = vec![0, 4, 4, 1, 3, 2, 0, 1, 1].into();
    let segments: Rc<[usize]> = vec![0, 0, 1, 1, 1, 3, 3, 4, 0].into();
    push("gather", check_inputs(std::slice::from_ref(&a), DEFAULT_STEP, |t, v| {
        let o = t.gather(v[0], index.clone())?;
        project(t, o, ps)
    })?, tol);
    push("segment_sum", check_inputs(std::slice::from_ref(&edges), DEFAULT_STEP, |t, v| {
        let o = t.segment_sum(v[0], segments.clone(), 5)?;
        project(t, o, ps)
    })?, tol);
    push("segment_softmax", check_inputs(&[edges], DEFAULT_STEP, |t, v| {
        let o = t.segment_softmax(v[0], segments.clone(), 5)?;
        project(t, o, ps)
    })?, tol);

    let logits = a.scale(3.0);
    let labels = [0usize, 2, 1, 1, 0];
    let mask = [true, false, true, true, true];
    let target = Rc::new(b.clone());
    push("cross_entropy", check_inputs(std::slice::from_ref(&logits), DEFAULT_STEP, |t, v| t.cross_entropy(v[0], &labels, &mask))?, tol);
    push("mse", check_inputs(std::slice::from_ref(&logits), DEFAULT_STEP, |t, v| t.mse(v[0], target.clone(), Some(&mask)))?, tol);
    push("mae", check_inputs(&[logits], DEFAULT_STEP, |t, v| t.mae(v[0], target.clone(), None))?, tol);

    let g = Graph::build(&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)], 5, true)?;
    let kappa = random(1, 3, 0.1, 1.0, &mut r);
    push("laplacian", check_inputs(std::slice::from_ref(&a), DEFAULT_STEP, |t, v| {
        let o = t.laplacian(v[0], &g)?;
        project(t, o, ps)
    })?, tol);
    push("cg_solve", check_inputs(&[a.clone(), kappa], DEFAULT_STEP, |t, v| {
        let o = t.cg_solve(&g, v[0], v[1], 0.8, CgSettings::converged(1e-13))?;
        project(t, o, ps)
    })?, tol);

    let cfg = LayerConfig { h: 0.6, cg: CgSettings::converged(1e-13), ..LayerConfig::default() };
    for batch_norm in [false, true] {
        let mut store = ParamStore::new();
        let params = AdrLayerParams::new(&mut store, "l0", 3, batch_norm, &mut r);
        let mut checks = check_params(&mut store, DEFAULT_STEP, 64, |t, st| {
            let u = t.constant(a.clone());
            let u0 = t.constant(b.clone());
            layer_output(t, &g, st, &params, &cfg, u, u0, ps)
        })?;
        checks.extend(check_inputs(&[a.clone(), b.clone()], DEFAULT_STEP, |t, v| {
            layer_output(t, &g, &store, &params, &cfg, v[0], v[1], ps)
        })?);
        push(if batch_norm { "adr_layer_bn" } else { "adr_layer" }, checks, tol);
    }

    let mut sc = StaticConfig::new(3, 3, 2, 2);
    sc.dropout = 0.2;
    sc.batch_norm = true;
    sc.cg = CgSettings::converged(1e-13);
    let mut m = AdrGnnStatic::new(sc, derive_seed(seed, 2))?;
    let frozen = m.clone();
    let labels = [0usize, 1, 1, 0, 1];
    let checks = check_params(&mut m.store, DEFAULT_STEP, 16, |t, store| {
        let mut dr = rng_from_seed(99);
        let mut ctx = Ctx::new(true, &mut dr);
        let o = frozen.forward_with(store, t, &g, &a, &mut ctx)?;
        t.cross_entropy(o.logits, &labels, &mask)
    })?;
    push("static_model", checks, MODEL_TOLERANCE);

    let mut tc = TemporalConfig::new(1, 3, 2, 1, 2);
    tc.n_frequencies = 2;
    tc.cg = CgSettings::converged(1e-13);
    let mut m = AdrGnnTemporal::new(tc, derive_seed(seed, 3))?;
    let frozen = m.clone();
    let x = a.slice_cols(0, 2);
    let temb = time_embedding_matrix(&[0.2, 0.3], 2, 5)?;
    let target = Rc::new(b.slice_cols(0, 1));
    let checks = check_params(&mut m.store, DEFAULT_STEP, 16, |t, store| {
        let mut dr = rng_from_seed(1);
        let mut ctx = Ctx::new(true, &mut dr);
        let o = frozen.forward_with(store, t, &g, &x, &temb, &mut ctx)?;
        t.mse(o.predictions, target.clone(), None)
    })?;
    push("temporal_model", checks, MODEL_TOLERANCE);
    Ok(out)
}
