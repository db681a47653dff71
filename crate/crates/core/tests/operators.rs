mod common;

use adrgnn::adr::{
    self, advect_values, advection_matrix, divergence_values, random_velocities, spectral_radius_estimate,
    AdrLayerParams, AdvectionParams, Ctx, DiffusionScheme, LayerConfig, ReactionParams, Terms,
};
use adrgnn::cg::{cg_solve, CgSettings};
use adrgnn::params::ParamStore;
use adrgnn::splitting::{expm, splitting_error, splitting_ratio_study};
use adrgnn::{Graph, Matrix, Tape};
use common::{dense_dirichlet_energy, positive_matrix, random_graph, random_matrix, rng, to_dmatrix};
use proptest::prelude::*;

fn graph_strategy() -> impl Strategy<Value = (Graph, u64)> {
    (2usize..60, 0.02f64..0.6, any::<u64>()).prop_map(|(n, p, seed)| (random_graph(n, p, seed), seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn advection_conserves_mass((g, seed) in graph_strategy(), c in 1usize..5, h in 0.001f64..=1.0) {
        let mut r = rng(seed);
        let v = random_velocities(&g, c, 3.0, &mut r);
        let u = random_matrix(g.n_nodes(), c, &mut r);
        let out = advect_values(&g, &u, &v, h).unwrap();
        for (a, b) in u.col_sums().iter().zip(out.col_sums()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        for s in divergence_values(&g, &v, &u).unwrap().col_sums() {
            prop_assert!(s.abs() <= 1e-10);
        }
    }

    #[test]
    fn advection_matrix_is_column_stochastic((g, seed) in graph_strategy(), h in 0.001f64..=1.0) {
        let mut r = rng(seed);
        let v = random_velocities(&g, 2, 3.0, &mut r);
        let a = advection_matrix(&g, &v, h, 1, 200).unwrap();
        prop_assert!(a.as_slice().iter().all(|&x| x >= 0.0));
        for s in a.col_sums() {
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert!(spectral_radius_estimate(&a, 500).unwrap() <= 1.0 + 1e-9);
        let schur = nalgebra::Schur::try_new(to_dmatrix(&a), 1e-14, 10_000).expect("Schur decomposition converges");
        let rho = schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        prop_assert!(rho <= 1.0 + 1e-9, "eigenvalue modulus {rho}");
        let u = random_matrix(g.n_nodes(), 2, &mut r);
        let direct = advect_values(&g, &u, &v, h).unwrap();
        let via_matrix = a.matmul(&Matrix::column(&u.col_to_vec(1))).unwrap();
        for i in 0..g.n_nodes() {
            prop_assert!((direct.get(i, 1) - via_matrix.get(i, 0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn advection_keeps_nonnegative_mass_bounded((g, seed) in graph_strategy(), h in 0.01f64..=1.0) {
        // the 1-norm of nonnegative features is invariant; it bounds every entry
        let mut r = rng(seed);
        let v = random_velocities(&g, 1, 3.0, &mut r);
        let mut u = positive_matrix(g.n_nodes(), 1, &mut r);
        let mass = u.sum();
        for _ in 0..100 {
            u = advect_values(&g, &u, &v, h).unwrap();
        }
        prop_assert!(u.as_slice().iter().all(|&x| x >= 0.0));
        prop_assert!((u.sum() - mass).abs() <= 1e-9 * mass.max(1.0));
        prop_assert!(u.max() <= mass * (1.0 + 1e-12));
    }

    #[test]
    fn advection_does_not_mix_channels((g, seed) in graph_strategy(), k in 0usize..3) {
        let mut r = rng(seed);
        let v = random_velocities(&g, 3, 2.0, &mut r);
        let u = random_matrix(g.n_nodes(), 3, &mut r);
        let mut zeroed = u.clone();
        for i in 0..g.n_nodes() {
            zeroed.set(i, k, 0.0);
        }
        let full = divergence_values(&g, &v, &u).unwrap();
        let part = divergence_values(&g, &v, &zeroed).unwrap();
        for i in 0..g.n_nodes() {
            for ch in 0..3 {
                if ch == k {
                    prop_assert_eq!(part.get(i, ch), 0.0);
                } else {
                    prop_assert_eq!(part.get(i, ch), full.get(i, ch));
                }
            }
        }
    }

    #[test]
    fn advection_is_one_hop_local((g, seed) in graph_strategy(), h in 0.01f64..=1.0) {
        let mut r = rng(seed);
        let v = random_velocities(&g, 2, 2.0, &mut r);
        let u = random_matrix(g.n_nodes(), 2, &mut r);
        let j = (seed as usize) % g.n_nodes();
        let mut bumped = u.clone();
        bumped.set(j, 0, u.get(j, 0) + 1.0);
        let a = advect_values(&g, &u, &v, h).unwrap();
        let b = advect_values(&g, &bumped, &v, h).unwrap();
        for i in 0..g.n_nodes() {
            if i != j && !g.neighbors(j).contains(&i) {
                prop_assert_eq!(a.row(i), b.row(i));
            }
        }
    }

    #[test]
    fn learned_velocities_sum_to_one((g, seed) in graph_strategy(), c in 1usize..4) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let params = AdvectionParams::new(&mut store, "l", c, &mut r);
        let u = random_matrix(g.n_nodes(), c, &mut r).scale(3.0);
        let mut t = Tape::new();
        let uv = t.constant(u);
        let w = adr::edge_velocities(&mut t, &store, &g, uv, &params).unwrap();
        let v = t.value(w.velocities);
        for i in 0..g.n_nodes() {
            for k in 0..c {
                let edges = g.out_edges(i);
                if edges.is_empty() {
                    continue;
                }
                let s: f64 = edges.map(|e| v.get(e, k)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
        prop_assert!(v.as_slice().iter().all(|&x| x > 0.0 && x <= 1.0));
        let one_sided = t.value(w.one_sided);
        for e in 0..g.n_edges() {
            let rev = g.reverse_index()[e];
            for k in 0..c {
                prop_assert_eq!(one_sided.get(e, k) * one_sided.get(rev, k), 0.0);
            }
        }
    }

    #[test]
    fn implicit_diffusion_does_not_raise_normalized_energy(n in 5usize..31, p in 0.1f64..0.5, seed in any::<u64>(), h in 0.01f64..2.0) {
        let g = random_graph(n, p, seed);
        let mut r = rng(seed);
        let u = random_matrix(n, 2, &mut r);
        let kappa = [0.2 + 0.8 * r.random::<f64>(), 1.0];
        let out = cg_solve(&g, &u, &kappa, h, CgSettings::converged(1e-13)).unwrap();
        for k in 0..2 {
            let before = normalized_energy(&g, &u, k);
            let after = normalized_energy(&g, &out, k);
            prop_assert!(after <= before + 1e-9, "channel {k}: {after} > {before}");
        }
    }

    #[test]
    fn reaction_is_node_local(seed in any::<u64>(), batch_norm in any::<bool>()) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let params = ReactionParams::new(&mut store, "l", 3, batch_norm, &mut r);
        let u = random_matrix(6, 3, &mut r);
        let u0 = random_matrix(6, 3, &mut r);
        let perm = [3usize, 0, 5, 1, 2, 4];
        let run = |u: &Matrix, u0: &Matrix| {
            let mut dr = rng(0);
            let mut ctx = Ctx::eval(&mut dr);
            let mut t = Tape::new();
            let uv = t.constant(u.clone());
            let u0v = t.constant(u0.clone());
            let out = adr::react(&mut t, &store, uv, u0v, &params, 0.4, &mut ctx).unwrap();
            t.value(out).clone()
        };
        let a = run(&u, &u0).permute_rows(&perm);
        let b = run(&u.permute_rows(&perm), &u0.permute_rows(&perm));
        prop_assert!(a.sub(&b).max_abs() <= 1e-15);
    }
}

use rand::Rng;

#[test]
fn constant_features_give_uniform_velocities() {
    let g = random_graph(12, 0.3, 4);
    let mut r = rng(0);
    let mut store = ParamStore::new();
    let params = AdvectionParams::new(&mut store, "l", 2, &mut r);
    let mut t = Tape::new();
    let u = t.constant(Matrix::filled(12, 2, 0.7));
    let w = adr::edge_velocities(&mut t, &store, &g, u, &params).unwrap();
    for (e, (s, _)) in g.directed_edges().enumerate() {
        for k in 0..2 {
            assert!((t.value(w.velocities).get(e, k) - 1.0 / g.degree(s) as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn constant_features_have_zero_divergence_on_regular_graphs() {
    // 6-cycle, uniform velocities 1/2
    let edges: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6)).collect();
    let g = Graph::build(&edges, 6, true).unwrap();
    let v = Matrix::filled(g.n_edges(), 1, 0.5);
    let u = Matrix::filled(6, 1, 2.5);
    assert_eq!(divergence_values(&g, &v, &u).unwrap().max_abs(), 0.0);

    let a = advection_matrix(&g, &v, 1.0, 0, 200).unwrap();
    for i in 0..6 {
        assert_eq!(a.get(i, i), 0.0);
        assert_eq!(a.get((i + 1) % 6, i), 0.5);
        assert_eq!(a.get((i + 5) % 6, i), 0.5);
    }
}

#[test]
fn tape_and_plain_advection_agree() {
    let g = random_graph(25, 0.2, 9);
    let mut r = rng(1);
    let v = random_velocities(&g, 3, 2.0, &mut r);
    let u = random_matrix(25, 3, &mut r);
    let mut t = Tape::new();
    let uv = t.constant(u.clone());
    let vv = t.constant(v.clone());
    let out = adr::advect(&mut t, &g, uv, vv, 0.35).unwrap();
    let plain = advect_values(&g, &u, &v, 0.35).unwrap();
    assert!(t.value(out).sub(&plain).max_abs() < 1e-15);
}

#[test]
fn zero_kappa_diffusion_is_identity() {
    let g = random_graph(10, 0.4, 2);
    let u = random_matrix(10, 2, &mut rng(3));
    let mut t = Tape::new();
    let uv = t.constant(u.clone());
    let k = t.constant(Matrix::zeros(1, 2));
    let out = adr::diffuse_with_kappa(&mut t, &g, uv, k, 0.5, CgSettings::default(), DiffusionScheme::Implicit).unwrap();
    assert_eq!(t.value(out), &u);
}

#[test]
fn negative_raw_diffusion_coefficients_clamp_to_identity() {
    let g = random_graph(10, 0.4, 2);
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let params = adr::DiffusionParams::new(&mut store, "l", 2);
    *store.value_mut(params.theta) = Matrix::row_vector(&[-0.3, -4.0]);
    let u = random_matrix(10, 2, &mut r);
    let mut t = Tape::new();
    let uv = t.constant(u.clone());
    let out = adr::diffuse(&mut t, &store, &g, uv, &params, 0.5, CgSettings::default(), DiffusionScheme::Implicit).unwrap();
    assert_eq!(t.value(out), &u);
}

#[test]
fn diffusion_commutes_with_automorphisms() {
    // cycle rotation i -> i+2 is an automorphism of the 8-cycle with chords (i, i+4)
    let mut edges: Vec<_> = (0..8).map(|i| (i, (i + 1) % 8)).collect();
    edges.extend((0..4).map(|i| (i, i + 4)));
    let g = Graph::build(&edges, 8, true).unwrap();
    let perm: Vec<usize> = (0..8).map(|i| (i + 2) % 8).collect();
    assert_eq!(g.permuted(&perm).unwrap(), g);
    let u = random_matrix(8, 3, &mut rng(5));
    let kappa = [0.2, 0.7, 1.0];
    let settings = CgSettings::converged(1e-14);
    let a = cg_solve(&g, &u, &kappa, 0.9, settings).unwrap().permute_rows(&perm);
    let b = cg_solve(&g, &u.permute_rows(&perm), &kappa, 0.9, settings).unwrap();
    assert!(a.sub(&b).max_abs() < 1e-12);
}

#[test]
fn energy_matches_dense_definition() {
    let g = random_graph(15, 0.3, 11);
    let u = random_matrix(15, 4, &mut rng(2));
    assert!((g.dirichlet_energy(&u).unwrap() - dense_dirichlet_energy(&g, &u)).abs() < 1e-12);
}

#[test]
fn zero_reaction_is_identity() {
    let mut r = rng(0);
    let mut store = ParamStore::new();
    let params = ReactionParams::new(&mut store, "l", 3, false, &mut r);
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).fill(0.0);
    }
    let u = random_matrix(4, 3, &mut r);
    let mut t = Tape::new();
    let uv = t.constant(u.clone());
    let mut ctx = Ctx::eval(&mut r);
    let out = adr::react(&mut t, &store, uv, uv, &params, 0.7, &mut ctx).unwrap();
    assert_eq!(t.value(out), &u);
}

fn fixture5() -> Graph {
    Graph::build(&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)], 5, true).unwrap()
}

#[test]
fn layer_is_the_composition_of_its_stages() {
    let g = fixture5();
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let params = AdrLayerParams::new(&mut store, "l", 3, false, &mut r);
    let u = random_matrix(5, 3, &mut r);
    let u0 = random_matrix(5, 3, &mut r);
    let cfg = LayerConfig { h: 0.4, ..LayerConfig::default() };

    let mut dr = rng(0);
    let mut ctx = Ctx::eval(&mut dr);
    let mut t = Tape::new();
    let uv = t.constant(u.clone());
    let u0v = t.constant(u0.clone());
    let stages = adr::adr_layer(&mut t, &store, &g, uv, u0v, uv, &params, &cfg, &mut ctx).unwrap();

    let mut t2 = Tape::new();
    let uv2 = t2.constant(u);
    let u0v2 = t2.constant(u0);
    let w = adr::edge_velocities(&mut t2, &store, &g, uv2, &params.advection).unwrap();
    let a = adr::advect(&mut t2, &g, uv2, w.velocities, 0.4).unwrap();
    let d = adr::diffuse(&mut t2, &store, &g, a, &params.diffusion, 0.4, cfg.cg, DiffusionScheme::Implicit).unwrap();
    let out = adr::react(&mut t2, &store, d, u0v2, &params.reaction, 0.4, &mut ctx).unwrap();
    assert_eq!(t.value(stages.advected), t2.value(a));
    assert_eq!(t.value(stages.diffused), t2.value(d));
    assert_eq!(t.value(stages.output), t2.value(out));
}

#[test]
fn layer_without_diffusion_and_reaction_is_pure_advection() {
    let g = fixture5();
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let params = AdrLayerParams::new(&mut store, "l", 2, false, &mut r);
    *store.value_mut(params.diffusion.theta) = Matrix::zeros(1, 2);
    for lin in [params.reaction.r1, params.reaction.r2, params.reaction.r3] {
        store.value_mut(lin.weight).fill(0.0);
        store.value_mut(lin.bias.unwrap()).fill(0.0);
    }
    let u = random_matrix(5, 2, &mut r);
    let cfg = LayerConfig { h: 0.9, ..LayerConfig::default() };
    let mut dr = rng(0);
    let mut ctx = Ctx::eval(&mut dr);
    let mut t = Tape::new();
    let uv = t.constant(u.clone());
    let full = adr::adr_layer(&mut t, &store, &g, uv, uv, uv, &params, &cfg, &mut ctx).unwrap();
    let only_a = LayerConfig { terms: Terms::parse("A").unwrap(), ..cfg };
    let adv = adr::adr_layer(&mut t, &store, &g, uv, uv, uv, &params, &only_a, &mut ctx).unwrap();
    assert_eq!(t.value(full.output), t.value(adv.output));
    assert_eq!(t.value(full.output), t.value(full.advected));
}

#[test]
fn expm_matches_nalgebra() {
    for seed in 0..10 {
        let a = random_matrix(6, 6, &mut rng(seed)).scale(2.5);
        let ours = expm(&a).unwrap();
        let theirs = to_dmatrix(&a).exp();
        for i in 0..6 {
            for j in 0..6 {
                let rel = (ours.get(i, j) - theirs[(i, j)]).abs() / theirs.amax();
                assert!(rel < 1e-12, "seed {seed} ({i},{j}): {rel:e}");
            }
        }
    }
}

#[test]
fn commuting_terms_split_exactly() {
    let mut r = rng(3);
    for _ in 0..20 {
        let diag = |r: &mut adrgnn::rng::DetRng| {
            let mut m = Matrix::zeros(5, 5);
            for i in 0..5 {
                m.set(i, i, r.random_range(-2.0..2.0));
            }
            m
        };
        let (a, d, rr) = (diag(&mut r), diag(&mut r), diag(&mut r));
        let u: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        assert!(splitting_error(&a, &d, &rr, 0.3, &u).unwrap() <= 1e-12);
    }
}

#[test]
fn non_commuting_error_is_second_order() {
    let study = splitting_ratio_study(4, 0.05, 50, 17).unwrap();
    assert!((3.3..=4.7).contains(&study.mean_ratio), "mean ratio {}", study.mean_ratio);
}

/// `x^T L̂ x` for channel `k`.
fn normalized_energy(g: &Graph, u: &Matrix, k: usize) -> f64 {
    let x: Vec<f64> = (0..u.rows()).map(|i| u.get(i, k)).collect();
    let mut lx = vec![0.0; x.len()];
    g.laplacian_apply_vec(&x, &mut lx);
    x.iter().zip(&lx).map(|(a, b)| a * b).sum()
}

// The unnormalized edge energy is not monotone under the normalized solve.
#[test]
fn unnormalized_energy_can_rise() {
    let (n, seed, h) = (5, 1592900045962149975, 1.6641705803006743);
    let g = random_graph(n, 0.1, seed);
    let mut r = rng(seed);
    let u = random_matrix(n, 2, &mut r);
    let kappa = [0.2 + 0.8 * r.random::<f64>(), 1.0];
    let out = cg_solve(&g, &u, &kappa, h, CgSettings::converged(1e-13)).unwrap();
    assert!(g.dirichlet_energy(&out).unwrap() > g.dirichlet_energy(&u).unwrap());
    for k in 0..2 {
        assert!(normalized_energy(&g, &out, k) <= normalized_energy(&g, &u, k));
    }
}
