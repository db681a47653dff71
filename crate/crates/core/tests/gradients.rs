mod common;

use std::rc::Rc;

use adrgnn::adr::{self, AdrLayerParams, Ctx, LayerConfig};
use adrgnn::cg::{cg_solve, cg_solve_unrolled, CgSettings};
use adrgnn::gradcheck::{check_inputs, check_params, overall_error, relative_error, DEFAULT_STEP};
use adrgnn::params::ParamStore;
use adrgnn::rng::rng_from_seed;
use adrgnn::{Graph, Matrix, Result, Tape, Var};
use common::{dense_laplacian, from_dmatrix, positive_matrix, random_graph, random_matrix, rng, to_dmatrix};

const PRIMITIVE_TOL: f64 = 1e-5;
const INSTANCES: u64 = 20;

/// `Σ out ⊙ W` for a fixed random `W`, turning any output into a scalar.
fn project(t: &mut Tape<'_>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.value(out).shape();
    let w = t.constant(random_matrix(r, c, &mut rng(seed ^ 0xabc)));
    let p = t.hadamard(out, w)?;
    Ok(t.sum(p))
}

fn assert_primitive<'g>(name: &str, inputs: Vec<Matrix>, f: impl Fn(&mut Tape<'g>, &[Var]) -> Result<Var>) {
    let checks = check_inputs(&inputs, DEFAULT_STEP, f).unwrap();
    let err = overall_error(&checks);
    assert!(err <= PRIMITIVE_TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_and_linear_primitives() {
    for s in 0..INSTANCES {
        let mut r = rng(s);
        let a = random_matrix(4, 3, &mut r);
        let b = random_matrix(4, 3, &mut r);
        let w = random_matrix(3, 5, &mut r);
        let row = random_matrix(1, 3, &mut r);
        let pos = positive_matrix(4, 3, &mut r).map(|x| x + 0.5);

        assert_primitive("matmul", vec![a.clone(), w.clone()], |t, v| {
            let o = t.matmul(v[0], v[1])?;
            project(t, o, s)
        });
        assert_primitive("add", vec![a.clone(), b.clone()], |t, v| {
            let o = t.add(v[0], v[1])?;
            project(t, o, s)
        });
        assert_primitive("sub", vec![a.clone(), b.clone()], |t, v| {
            let o = t.sub(v[0], v[1])?;
            project(t, o, s)
        });
        assert_primitive("add_row", vec![a.clone(), row.clone()], |t, v| {
            let o = t.add_row(v[0], v[1])?;
            project(t, o, s)
        });
        assert_primitive("mul_row", vec![a.clone(), row.clone()], |t, v| {
            let o = t.mul_row(v[0], v[1])?;
            project(t, o, s)
        });
        assert_primitive("hadamard", vec![a.clone(), b.clone()], |t, v| {
            let o = t.hadamard(v[0], v[1])?;
            project(t, o, s)
        });
        assert_primitive("div", vec![a.clone(), pos.clone()], |t, v| {
            let o = t.div(v[0], v[1])?;
            project(t, o, s)
        });
        assert_primitive("scale", vec![a.clone()], |t, v| {
            let o = t.scale(v[0], -1.7);
            project(t, o, s)
        });
        assert_primitive("relu", vec![a.clone()], |t, v| {
            let o = t.relu(v[0]);
            project(t, o, s)
        });
        assert_primitive("tanh", vec![a.clone()], |t, v| {
            let o = t.tanh(v[0]);
            project(t, o, s)
        });
        assert_primitive("hardtanh", vec![a.scale(1.5)], |t, v| {
            let o = t.hardtanh(v[0], -0.4, 0.6)?;
            project(t, o, s)
        });
        assert_primitive("dropout", vec![a.clone()], |t, v| {
            let mut dr = rng_from_seed(s);
            let o = t.dropout(v[0], 0.3, true, &mut dr)?;
            project(t, o, s)
        });
        assert_primitive("concat_cols", vec![a.clone(), b.slice_cols(0, 2)], |t, v| {
            let o = t.concat_cols(&[v[0], v[1]])?;
            project(t, o, s)
        });
        assert_primitive("slice_cols", vec![a.clone()], |t, v| {
            let o = t.slice_cols(v[0], 1, 3)?;
            project(t, o, s)
        });
        assert_primitive("col_dot", vec![a.clone(), b.clone()], |t, v| {
            let o = t.col_dot(v[0], v[1])?;
            project(t, o, s)
        });
        assert_primitive("batch_norm", vec![a.clone()], |t, v| {
            let (o, _, _) = t.batch_norm(v[0], 1e-5)?;
            project(t, o, s)
        });
    }
}

#[test]
fn index_primitives() {
    for s in 0..INSTANCES {
        let mut r = rng(s);
        let x = random_matrix(5, 3, &mut r);
        let edges = random_matrix(9, 3, &mut r).scale(2.0);
        let index: Rc<[usize]> = vec![0, 4, 4, 1, 3, 2, 0, 1, 1].into();
        let segments: Rc<[usize]> = vec![0, 0, 1, 1, 1, 3, 3, 4, 0].into();

        let idx = index.clone();
        assert_primitive("row_gather", vec![x.clone()], move |t, v| {
            let o = t.gather(v[0], idx.clone())?;
            project(t, o, s)
        });
        let seg = segments.clone();
        assert_primitive("segment_sum", vec![edges.clone()], move |t, v| {
            let o = t.segment_sum(v[0], seg.clone(), 5)?;
            project(t, o, s)
        });
        let seg = segments.clone();
        assert_primitive("segment_softmax", vec![edges.clone()], move |t, v| {
            let o = t.segment_softmax(v[0], seg.clone(), 5)?;
            project(t, o, s)
        });
    }
}

#[test]
fn loss_primitives() {
    for s in 0..INSTANCES {
        let mut r = rng(s);
        let logits = random_matrix(6, 4, &mut r).scale(3.0);
        let labels = [0usize, 3, 2, 1, 1, 0];
        let mask = [true, false, true, true, false, true];
        let target = Rc::new(random_matrix(6, 4, &mut r));

        assert_primitive("cross_entropy", vec![logits.clone()], |t, v| t.cross_entropy(v[0], &labels, &mask));
        let tg = target.clone();
        assert_primitive("mse", vec![logits.clone()], move |t, v| t.mse(v[0], tg.clone(), Some(&mask)));
        let tg = target.clone();
        assert_primitive("mae", vec![logits.clone()], move |t, v| t.mae(v[0], tg.clone(), None));
    }
}

#[test]
fn laplacian_and_cg_gradients() {
    let settings = CgSettings::converged(1e-12);
    for s in 0..INSTANCES {
        let g = random_graph(12, 0.3, s);
        let mut r = rng(s);
        let x = random_matrix(12, 3, &mut r);
        let kappa = positive_matrix(1, 3, &mut r).map(|k| 0.1 + 0.9 * k);
        let h = 0.8;

        assert_primitive("laplacian", vec![x.clone()], |t, v| {
            let o = t.laplacian(v[0], &g)?;
            project(t, o, s)
        });
        assert_primitive("cg_solve", vec![x.clone(), kappa.clone()], |t, v| {
            let o = t.cg_solve(&g, v[0], v[1], h, settings)?;
            project(t, o, s)
        });
    }
}

#[test]
fn sum_of_squares_gradient() {
    let mut t = Tape::new();
    let x = t.variable(Matrix::scalar(3.0));
    let sq = t.hadamard(x, x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);
}

#[test]
fn converged_cg_matches_dense_solve() {
    for s in 0..20 {
        let n = 5 + (s as usize) % 26;
        let g = random_graph(n, 0.25, 100 + s);
        let mut r = rng(s);
        let b = random_matrix(n, 2, &mut r);
        let kappa = [0.3, 1.0];
        let h = 0.9;
        let x = cg_solve(&g, &b, &kappa, h, CgSettings { iterations: n, tol: None }).unwrap();

        let l = dense_laplacian(&g);
        for (c, &k) in kappa.iter().enumerate() {
            let a = nalgebra::DMatrix::<f64>::identity(n, n) + &l * (h * k);
            let bc = nalgebra::DVector::from_vec(b.col_to_vec(c));
            let exact = a.lu().solve(&bc).unwrap();
            let err = relative_error(&x.col_to_vec(c), exact.as_slice());
            assert!(err <= 1e-8, "n={n} channel {c}: {err:e}");
        }
    }
}

#[test]
fn implicit_adjoint_matches_unrolled_iterations() {
    let settings = CgSettings::converged(1e-12);
    for s in 0..10 {
        let g = random_graph(15, 0.3, 200 + s);
        let mut r = rng(s);
        let b = random_matrix(15, 3, &mut r);
        let kappa = positive_matrix(1, 3, &mut r);
        let w = random_matrix(15, 3, &mut r);

        let grads = |unrolled: bool| -> (Matrix, Matrix) {
            let mut t = Tape::new();
            let bv = t.variable(b.clone());
            let kv = t.variable(kappa.clone());
            let x = if unrolled {
                cg_solve_unrolled(&mut t, &g, bv, kv, 0.7, settings).unwrap()
            } else {
                t.cg_solve(&g, bv, kv, 0.7, settings).unwrap()
            };
            let wv = t.constant(w.clone());
            let p = t.hadamard(x, wv).unwrap();
            let loss = t.sum(p);
            t.backward(loss).unwrap();
            (t.grad(bv).unwrap().clone(), t.grad(kv).unwrap().clone())
        };
        let (gb_imp, gk_imp) = grads(false);
        let (gb_unr, gk_unr) = grads(true);
        assert!(relative_error(gb_imp.as_slice(), gb_unr.as_slice()) <= 1e-6);
        assert!(relative_error(gk_imp.as_slice(), gk_unr.as_slice()) <= 1e-6);
    }
}

#[test]
fn dense_laplacian_oracle_agrees() {
    let g = random_graph(20, 0.2, 7);
    let x = random_matrix(20, 2, &mut rng(1));
    let dense = from_dmatrix(&(dense_laplacian(&g) * to_dmatrix(&x)));
    let sparse = g.laplacian_apply(&x).unwrap();
    assert!(dense.sub(&sparse).max_abs() < 1e-13);
}

fn layer_fixture() -> (Graph, Matrix, Matrix) {
    let g = Graph::build(&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)], 5, true).unwrap();
    let mut r = rng(77);
    (g, random_matrix(5, 3, &mut r), random_matrix(5, 3, &mut r))
}

fn layer_loss<'g>(
    t: &mut Tape<'g>,
    g: &'g Graph,
    store: &ParamStore,
    params: &AdrLayerParams,
    cfg: &LayerConfig,
    u: Var,
    u0: Var,
) -> Result<Var> {
    let mut dr = rng(0);
    let mut ctx = Ctx::new(true, &mut dr);
    let stages = adr::adr_layer(t, store, g, u, u0, u, params, cfg, &mut ctx)?;
    project(t, stages.output, 3)
}

#[test]
fn adr_layer_gradients_match_finite_differences() {
    let (g, u, u0) = layer_fixture();
    let cfg = LayerConfig { h: 0.6, cg: CgSettings::converged(1e-13), ..LayerConfig::default() };
    for batch_norm in [false, true] {
        let mut store = ParamStore::new();
        let params = AdrLayerParams::new(&mut store, "l0", 3, batch_norm, &mut rng(5));
        let checks = check_params(&mut store, DEFAULT_STEP, 64, |t, st| {
            let uv = t.constant(u.clone());
            let u0v = t.constant(u0.clone());
            layer_loss(t, &g, st, &params, &cfg, uv, u0v)
        })
        .unwrap();
        let err = overall_error(&checks);
        assert!(err <= 1e-5, "batch_norm={batch_norm}: parameter gradient error {err:e}");

        let checks =
            check_inputs(&[u.clone(), u0.clone()], DEFAULT_STEP, |t, v| layer_loss(t, &g, &store, &params, &cfg, v[0], v[1]))
                .unwrap();
        let err = overall_error(&checks);
        assert!(err <= 1e-5, "batch_norm={batch_norm}: input gradient error {err:e}");
    }
}
