//! The three discretized terms and the operator-split layer.
//!
//! * advection: `U + h·DIV(V U)` with `DIV_i = Σ_{j∈N_i} V_{j→i} ⊙ U_j − U_i`,
//!   where `V` is learned per directed edge and channel and sums to one over
//!   each node's outbound edges;
//! * diffusion: `(I + h K ⊗ L̂)^{-1}` applied channel by channel, `K =
//!   diag(hardtanh(θ_d, 0, 1))`;
//! * reaction: `U + h·σ(U R_1 + tanh(U R_2) ⊙ U + U⁰ R_3)`.
//!
//! Each tape-level operator has a plain-matrix twin (`*_values`) used by the
//! property tests and the studies.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::cg::CgSettings;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Linear, ParamGroup, ParamId, ParamStore};
use crate::rng::DetRng;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

pub const DEFAULT_DENSE_LIMIT: usize = 200;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Which terms of the layer are active; inactive ones are the identity.
/// Serialized as the label, e.g. `"AD"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Terms {
    pub advection: bool,
    pub diffusion: bool,
    pub reaction: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { advection: true, diffusion: true, reaction: true };

    pub fn is_empty(&self) -> bool {
        !(self.advection || self.diffusion || self.reaction)
    }

    /// Parses subsets such as `"A"`, `"DR"` or `"ADR"`.
    pub fn parse(s: &str) -> Result<Terms> {
        let mut t = Terms { advection: false, diffusion: false, reaction: false };
        for ch in s.chars() {
            match ch.to_ascii_uppercase() {
                'A' => t.advection = true,
                'D' => t.diffusion = true,
                'R' => t.reaction = true,
                _ => return Err(Error::invalid(format!("unknown term '{ch}' in {s:?}"))),
            }
        }
        if t.is_empty() {
            return Err(Error::invalid("empty term subset"));
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        if self.advection {
            s.push('A');
        }
        if self.diffusion {
            s.push('D');
        }
        if self.reaction {
            s.push('R');
        }
        s
    }
}

impl TryFrom<String> for Terms {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Terms::parse(&s)
    }
}

impl From<Terms> for String {
    fn from(t: Terms) -> String {
        t.label()
    }
}

impl Default for Terms {
    fn default() -> Self {
        Terms::ALL
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffusionScheme {
    #[default]
    Implicit,
    /// Forward Euler `U - h L̂ U K`; marginally stable, kept for comparisons.
    Explicit,
}

/// Per-forward-pass state: train/eval mode, dropout randomness, and pending
/// batch-norm running-statistic updates.
pub struct Ctx<'r> {
    pub train: bool,
    pub rng: &'r mut DetRng,
    pub running_updates: Vec<(ParamId, Matrix)>,
}

impl<'r> Ctx<'r> {
    pub fn new(train: bool, rng: &'r mut DetRng) -> Self {
        Self { train, rng, running_updates: Vec::new() }
    }

    pub fn eval(rng: &'r mut DetRng) -> Self {
        Self::new(false, rng)
    }

    /// Writes pending running statistics into `store`.
    pub fn apply_running_updates(&mut self, store: &mut ParamStore) {
        for (id, v) in self.running_updates.drain(..) {
            *store.value_mut(id) = v;
        }
    }
}

// ---------------------------------------------------------------- advection

/// `A_1, A_2` carry biases; `A_3, A_4` do not, so the one-sided zero of the
/// ReLU pair survives the two linear maps.
#[derive(Clone, Copy, Debug)]
pub struct AdvectionParams {
    pub a1: Linear,
    pub a2: Linear,
    pub a3: Linear,
    pub a4: Linear,
}

impl AdvectionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut DetRng) -> Self {
        let g = ParamGroup::Advection;
        Self {
            a1: Linear::new(store, &format!("{prefix}.adv.a1"), g, channels, channels, true, rng),
            a2: Linear::new(store, &format!("{prefix}.adv.a2"), g, channels, channels, true, rng),
            a3: Linear::new(store, &format!("{prefix}.adv.a3"), g, channels, channels, false, rng),
            a4: Linear::new(store, &format!("{prefix}.adv.a4"), g, channels, channels, false, rng),
        }
    }
}

/// Intermediate and final edge weights, each an m×c array in edge order.
#[derive(Clone, Copy, Debug)]
pub struct EdgeWeights {
    /// `ReLU(Z_ij − Z_ji)` for edge `i→j`, before `A_4`.
    pub one_sided: Var,
    /// `ReLU(Z_ij − Z_ji) A_4`, the softmax logits.
    pub logits: Var,
    /// Softmax over each node's outbound edges.
    pub velocities: Var,
}

/// Directional edge weights from node features.
pub fn edge_velocities<'g>(
    tape: &mut Tape<'g>,
    store: &ParamStore,
    graph: &'g Graph,
    u: Var,
    params: &AdvectionParams,
) -> Result<EdgeWeights> {
    let n = graph.n_nodes();
    if tape.value(u).rows() != n {
        return Err(Error::shape("edge_velocities", format!("{:?} features for {n} nodes", tape.value(u).shape())));
    }
    let sources: Rc<[usize]> = graph.sources().into();
    let targets: Rc<[usize]> = graph.targets().into();
    let reverse: Rc<[usize]> = graph.reverse_index().into();

    let ua1 = params.a1.forward(tape, store, u)?;
    let ua2 = params.a2.forward(tape, store, u)?;
    let from_src = tape.gather(ua1, sources.clone())?;
    let from_dst = tape.gather(ua2, targets)?;
    let pre = tape.add(from_src, from_dst)?;
    let act = tape.relu(pre);
    let z = params.a3.forward(tape, store, act)?;
    let z_rev = tape.gather(z, reverse)?;
    let diff = tape.sub(z, z_rev)?;
    let one_sided = tape.relu(diff);
    let logits = params.a4.forward(tape, store, one_sided)?;
    let velocities = tape.segment_softmax(logits, sources, n)?;
    Ok(EdgeWeights { one_sided, logits, velocities })
}

fn neighbor_mask(graph: &Graph, channels: usize) -> Matrix {
    let mut m = Matrix::zeros(graph.n_nodes(), channels);
    for i in 0..graph.n_nodes() {
        if graph.degree(i) > 0 {
            m.row_mut(i).fill(1.0);
        }
    }
    m
}

/// `DIV_i(VU) = Σ_{j∈N_i} V_{j→i} ⊙ U_j − U_i`; zero on isolated nodes.
pub fn divergence<'g>(tape: &mut Tape<'g>, graph: &'g Graph, v: Var, u: Var) -> Result<Var> {
    let (n, c) = tape.value(u).shape();
    if n != graph.n_nodes() || tape.value(v).shape() != (graph.n_edges(), c) {
        return Err(Error::shape(
            "divergence",
            format!("velocities {:?}, features {:?}, graph ({n} nodes, {} edges)", tape.value(v).shape(), (n, c), graph.n_edges()),
        ));
    }
    let u_src = tape.gather(u, graph.sources().into())?;
    let flux = tape.hadamard(v, u_src)?;
    let inflow = tape.segment_sum(flux, graph.targets().into(), n)?;
    let outflow = tape.mask(u, Rc::new(neighbor_mask(graph, c)))?;
    tape.sub(inflow, outflow)
}

fn check_step(h: f64, allow_unstable: bool) -> Result<()> {
    if h > 0.0 && h <= 1.0 {
        return Ok(());
    }
    if allow_unstable && h >= 0.0 && h.is_finite() {
        log::warn!("advection step h = {h} is outside (0, 1]; stability is not guaranteed");
        return Ok(());
    }
    Err(Error::invalid(format!("advection step size h = {h} must lie in (0, 1]")))
}

/// Forward-Euler advection `U + h·DIV(VU)`, requiring `0 < h ≤ 1`.
pub fn advect<'g>(tape: &mut Tape<'g>, graph: &'g Graph, u: Var, v: Var, h: f64) -> Result<Var> {
    advect_with(tape, graph, u, v, h, false)
}

/// [`advect`] with an override that admits `h = 0` and `h > 1` (logged).
pub fn advect_with<'g>(
    tape: &mut Tape<'g>,
    graph: &'g Graph,
    u: Var,
    v: Var,
    h: f64,
    allow_unstable: bool,
) -> Result<Var> {
    check_step(h, allow_unstable)?;
    let div = divergence(tape, graph, v, u)?;
    let step = tape.scale(div, h);
    tape.add(u, step)
}

/// Plain-matrix divergence.
pub fn divergence_values(graph: &Graph, v: &Matrix, u: &Matrix) -> Result<Matrix> {
    let c = u.cols();
    if u.rows() != graph.n_nodes() || v.shape() != (graph.n_edges(), c) {
        return Err(Error::shape("divergence", format!("velocities {:?}, features {:?}", v.shape(), u.shape())));
    }
    let mut out = Matrix::zeros(graph.n_nodes(), c);
    for (e, (s, t)) in graph.directed_edges().enumerate() {
        let (vs, us) = (v.row(e), u.row(s));
        for ((o, a), b) in out.row_mut(t).iter_mut().zip(vs).zip(us) {
            *o += a * b;
        }
    }
    for i in 0..graph.n_nodes() {
        if graph.degree(i) > 0 {
            let ui = u.row(i).to_vec();
            for (o, x) in out.row_mut(i).iter_mut().zip(ui) {
                *o -= x;
            }
        }
    }
    Ok(out)
}

/// Plain-matrix advection step.
pub fn advect_values(graph: &Graph, u: &Matrix, v: &Matrix, h: f64) -> Result<Matrix> {
    check_step(h, false)?;
    let mut out = u.clone();
    out.axpy(h, &divergence_values(graph, v, u)?);
    Ok(out)
}

/// Dense `(1 − h)I + hVᵀ` for one channel (identity rows on isolated nodes),
/// so that `A · u[:, channel]` equals the advection output.
pub fn advection_matrix(graph: &Graph, v: &Matrix, h: f64, channel: usize, dense_limit: usize) -> Result<Matrix> {
    let n = graph.n_nodes();
    if n > dense_limit {
        return Err(Error::DenseLimit { n, limit: dense_limit });
    }
    if v.rows() != graph.n_edges() || channel >= v.cols() {
        return Err(Error::shape("advection_matrix", format!("velocities {:?}, channel {channel}", v.shape())));
    }
    check_step(h, false)?;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        a.set(i, i, if graph.degree(i) > 0 { 1.0 - h } else { 1.0 });
    }
    for (e, (s, t)) in graph.directed_edges().enumerate() {
        a.set(t, s, a.get(t, s) + h * v.get(e, channel));
    }
    Ok(a)
}

/// Power-iteration estimate of the spectral radius from a positive start
/// vector, normalizing in the 1-norm: `||A x_k||₁ / ||x_k||₁` after `iterations`
/// steps.
pub fn spectral_radius_estimate(a: &Matrix, iterations: usize) -> Result<f64> {
    let n = a.rows();
    if a.cols() != n || n == 0 {
        return Err(Error::shape("spectral_radius_estimate", format!("{:?} is not square", a.shape())));
    }
    let mut x = Matrix::filled(n, 1, 1.0 / n as f64);
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let y = a.matmul(&x)?;
        let norm_x: f64 = x.as_slice().iter().map(|v| v.abs()).sum();
        let norm_y: f64 = y.as_slice().iter().map(|v| v.abs()).sum();
        if norm_y == 0.0 {
            return Ok(0.0);
        }
        estimate = norm_y / norm_x;
        x = y.scale(1.0 / norm_y);
    }
    Ok(estimate)
}

/// Valid velocities from random logits (softmax per source node).
pub fn random_velocities(graph: &Graph, channels: usize, scale: f64, rng: &mut DetRng) -> Matrix {
    let m = graph.n_edges();
    let mut logits = Matrix::zeros(m, channels);
    for x in logits.as_mut_slice() {
        *x = crate::rng::uniform(rng, -scale, scale);
    }
    softmax_by_source(graph, &logits)
}

/// Per-channel softmax of edge logits over each node's outbound edges.
pub fn softmax_by_source(graph: &Graph, logits: &Matrix) -> Matrix {
    let c = logits.cols();
    let mut out = Matrix::zeros(logits.rows(), c);
    for i in 0..graph.n_nodes() {
        let edges = graph.out_edges(i);
        if edges.is_empty() {
            continue;
        }
        for k in 0..c {
            let m = edges.clone().map(|e| logits.get(e, k)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = edges.clone().map(|e| (logits.get(e, k) - m).exp()).sum();
            for e in edges.clone() {
                out.set(e, k, (logits.get(e, k) - m).exp() / z);
            }
        }
    }
    out
}

// ---------------------------------------------------------------- diffusion

#[derive(Clone, Copy, Debug)]
pub struct DiffusionParams {
    /// Raw 1×c coefficients; the effective ones are `hardtanh(θ_d, 0, 1)`.
    pub theta: ParamId,
}

impl DiffusionParams {
    /// Raw coefficients start at 0.5, inside the clamp, so they receive
    /// gradients from the first step.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let theta = store.add(format!("{prefix}.diff.theta"), ParamGroup::Diffusion, Matrix::filled(1, channels, 0.5));
        Self { theta }
    }
}

pub fn diffusion_coefficients(tape: &mut Tape<'_>, store: &ParamStore, params: &DiffusionParams) -> Result<Var> {
    let theta = tape.param(store, params.theta);
    tape.hardtanh(theta, 0.0, 1.0)
}

/// Diffusion step with coefficients given as a 1×c row `kappa`.
pub fn diffuse_with_kappa<'g>(
    tape: &mut Tape<'g>,
    graph: &'g Graph,
    u: Var,
    kappa: Var,
    h: f64,
    cg: CgSettings,
    scheme: DiffusionScheme,
) -> Result<Var> {
    if h <= 0.0 {
        return Err(Error::invalid(format!("diffusion step size h = {h} must be positive")));
    }
    match scheme {
        DiffusionScheme::Implicit => tape.cg_solve(graph, u, kappa, h, cg),
        DiffusionScheme::Explicit => {
            let lu = tape.laplacian(u, graph)?;
            let scaled = tape.mul_row(lu, kappa)?;
            let step = tape.scale(scaled, h);
            tape.sub(u, step)
        }
    }
}

pub fn diffuse<'g>(
    tape: &mut Tape<'g>,
    store: &ParamStore,
    graph: &'g Graph,
    u: Var,
    params: &DiffusionParams,
    h: f64,
    cg: CgSettings,
    scheme: DiffusionScheme,
) -> Result<Var> {
    let kappa = diffusion_coefficients(tape, store, params)?;
    diffuse_with_kappa(tape, graph, u, kappa, h, cg, scheme)
}

// ----------------------------------------------------------------- reaction

#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ReactionParams {
    pub r1: Linear,
    pub r2: Linear,
    pub r3: Linear,
    pub batch_norm: Option<BatchNormParams>,
}

impl ReactionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, batch_norm: bool, rng: &mut DetRng) -> Self {
        let g = ParamGroup::Reaction;
        let r1 = Linear::new(store, &format!("{prefix}.react.r1"), g, channels, channels, true, rng);
        let r2 = Linear::new(store, &format!("{prefix}.react.r2"), g, channels, channels, true, rng);
        let r3 = Linear::new(store, &format!("{prefix}.react.r3"), g, channels, channels, true, rng);
        let batch_norm = batch_norm.then(|| BatchNormParams {
            gamma: store.add(format!("{prefix}.react.bn.gamma"), g, Matrix::filled(1, channels, 1.0)),
            beta: store.add(format!("{prefix}.react.bn.beta"), g, Matrix::zeros(1, channels)),
            running_mean: store.add_buffer(format!("{prefix}.react.bn.running_mean"), Matrix::zeros(1, channels)),
            running_var: store.add_buffer(format!("{prefix}.react.bn.running_var"), Matrix::filled(1, channels, 1.0)),
        });
        Self { r1, r2, r3, batch_norm }
    }
}

fn batch_norm(tape: &mut Tape<'_>, store: &ParamStore, x: Var, bn: &BatchNormParams, ctx: &mut Ctx<'_>) -> Result<Var> {
    let normalized = if ctx.train {
        let (y, mean, var) = tape.batch_norm(x, BN_EPS)?;
        let blend = |old: &Matrix, new: &[f64]| {
            let vals: Vec<f64> =
                old.as_slice().iter().zip(new).map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n).collect();
            Matrix::row_vector(&vals)
        };
        ctx.running_updates.push((bn.running_mean, blend(store.value(bn.running_mean), &mean)));
        ctx.running_updates.push((bn.running_var, blend(store.value(bn.running_var), &var)));
        y
    } else {
        let shift = tape.constant(store.value(bn.running_mean).scale(-1.0));
        let inv_std = tape.constant(store.value(bn.running_var).map(|v| 1.0 / (v + BN_EPS).sqrt()));
        let centered = tape.add_row(x, shift)?;
        tape.mul_row(centered, inv_std)?
    };
    let gamma = tape.param(store, bn.gamma);
    let beta = tape.param(store, bn.beta);
    let scaled = tape.mul_row(normalized, gamma)?;
    tape.add_row(scaled, beta)
}

/// `f(U, U⁰) = σ(U R_1 + tanh(U R_2) ⊙ U + U⁰ R_3)` with optional batch norm
/// before `σ = ReLU`.
pub fn reaction_term(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    u: Var,
    u0: Var,
    params: &ReactionParams,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    if tape.value(u).shape() != tape.value(u0).shape() {
        return Err(Error::shape("react", format!("{:?} vs {:?}", tape.value(u).shape(), tape.value(u0).shape())));
    }
    let additive = params.r1.forward(tape, store, u)?;
    let gate_pre = params.r2.forward(tape, store, u)?;
    let gate = tape.tanh(gate_pre);
    let multiplicative = tape.hadamard(gate, u)?;
    let skip = params.r3.forward(tape, store, u0)?;
    let s = tape.add(additive, multiplicative)?;
    let mut pre = tape.add(s, skip)?;
    if let Some(bn) = &params.batch_norm {
        pre = batch_norm(tape, store, pre, bn, ctx)?;
    }
    Ok(tape.relu(pre))
}

/// Forward-Euler reaction `U + h·f(U, U⁰)`.
pub fn react(
    tape: &mut Tape<'_>,
    store: &ParamStore,
    u: Var,
    u0: Var,
    params: &ReactionParams,
    h: f64,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let f = reaction_term(tape, store, u, u0, params, ctx)?;
    let step = tape.scale(f, h);
    tape.add(u, step)
}

// -------------------------------------------------------------------- layer

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub h: f64,
    pub cg: CgSettings,
    pub terms: Terms,
    pub scheme: DiffusionScheme,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self { h: 0.5, cg: CgSettings::default(), terms: Terms::ALL, scheme: DiffusionScheme::Implicit }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdrLayerParams {
    pub advection: AdvectionParams,
    pub diffusion: DiffusionParams,
    pub reaction: ReactionParams,
}

impl AdrLayerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, batch_norm: bool, rng: &mut DetRng) -> Self {
        Self {
            advection: AdvectionParams::new(store, prefix, channels, rng),
            diffusion: DiffusionParams::new(store, prefix, channels),
            reaction: ReactionParams::new(store, prefix, channels, batch_norm, rng),
        }
    }
}

/// Stage outputs `U^(l+1/3)`, `U^(l+2/3)`, `U^(l+1)`.
#[derive(Clone, Copy, Debug)]
pub struct LayerStages {
    pub advected: Var,
    pub diffused: Var,
    pub output: Var,
}

/// One operator-split step: advection, then diffusion, then reaction.
/// `velocity_source` is the feature matrix the edge velocities are computed
/// from (`u` itself in the static model).
#[allow(clippy::too_many_arguments)]
pub fn adr_layer<'g>(
    tape: &mut Tape<'g>,
    store: &ParamStore,
    graph: &'g Graph,
    u: Var,
    u0: Var,
    velocity_source: Var,
    params: &AdrLayerParams,
    cfg: &LayerConfig,
    ctx: &mut Ctx<'_>,
) -> Result<LayerStages> {
    let advected = if cfg.terms.advection {
        let w = edge_velocities(tape, store, graph, velocity_source, &params.advection)?;
        advect(tape, graph, u, w.velocities, cfg.h)?
    } else {
        u
    };
    let diffused = if cfg.terms.diffusion {
        diffuse(tape, store, graph, advected, &params.diffusion, cfg.h, cfg.cg, cfg.scheme)?
    } else {
        advected
    };
    let output = if cfg.terms.reaction {
        react(tape, store, diffused, u0, &params.reaction, cfg.h, ctx)?
    } else {
        diffused
    };
    Ok(LayerStages { advected, diffused, output })
}
