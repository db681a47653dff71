//! Fitting term subsets to the synthetic transport task.
//!
//! The fitted model is a stack of single-channel layers applied to the
//! source features. Advection uses a free logit per directed edge and
//! layer (velocities are their softmax over each node's out-edges) and a
//! unit step, diffusion a learned coefficient per layer with a converged
//! implicit solve, and reaction the usual pointwise MLP with the source
//! features as the skip input.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, GroupHypers};
use crate::adr::{self, Ctx, DiffusionParams, DiffusionScheme, ReactionParams, Terms};
use crate::cg::CgSettings;
use crate::data::TransportTask;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::{derive_seed, rng_from_seed, uniform};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub layers: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Record every `log_every` optimizer steps (and the last one).
    pub log_every: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { layers: 8, steps: 2000, lr: 0.05, seed: 0, log_every: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportLog {
    pub step: usize,
    pub mse: f64,
    /// Total of the fitted node values.
    pub mass: f64,
}

#[derive(Clone, Debug)]
pub struct TransportFit {
    pub terms: Terms,
    pub final_mse: f64,
    pub prediction: Matrix,
    pub history: Vec<TransportLog>,
}

struct Layer {
    logits: Option<ParamId>,
    diffusion: Option<DiffusionParams>,
    reaction: Option<ReactionParams>,
}

struct Stack {
    store: ParamStore,
    layers: Vec<Layer>,
}

impl Stack {
    fn new(task: &TransportTask, terms: Terms, cfg: &TransportConfig) -> Self {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x7472));
        let mut store = ParamStore::new();
        let m = task.graph.n_edges();
        let layers = (0..cfg.layers)
            .map(|l| {
                let prefix = format!("layer{l}");
                let logits = terms.advection.then(|| {
                    let init = (0..m).map(|_| uniform(&mut rng, -0.1, 0.1)).collect();
                    store.add(format!("{prefix}.adv.logits"), ParamGroup::Advection, Matrix::from_vec(m, 1, init).expect("m × 1"))
                });
                let diffusion = terms.diffusion.then(|| DiffusionParams::new(&mut store, &prefix, 1));
                let reaction = terms.reaction.then(|| ReactionParams::new(&mut store, &prefix, 1, false, &mut rng));
                Layer { logits, diffusion, reaction }
            })
            .collect();
        Self { store, layers }
    }

    fn forward<'g>(&self, tape: &mut Tape<'g>, task: &'g TransportTask, ctx: &mut Ctx<'_>) -> Result<Var> {
        let g = &task.graph;
        let u0 = tape.constant(task.source_features.clone());
        let mut u = u0;
        for layer in &self.layers {
            if let Some(id) = layer.logits {
                let z = tape.param(&self.store, id);
                let v = tape.segment_softmax(z, g.sources().into(), g.n_nodes())?;
                u = adr::advect(tape, g, u, v, 1.0)?;
            }
            if let Some(d) = &layer.diffusion {
                u = adr::diffuse(tape, &self.store, g, u, d, 1.0, CgSettings::converged(1e-12), DiffusionScheme::Implicit)?;
            }
            if let Some(r) = &layer.reaction {
                u = adr::react(tape, &self.store, u, u0, r, 1.0, ctx)?;
            }
        }
        Ok(u)
    }
}

/// Minimizes the MSE between the stack output and the target features with
/// Adam, starting from a seeded initialization.
pub fn fit_transport(task: &TransportTask, terms: Terms, cfg: &TransportConfig) -> Result<TransportFit> {
    if terms.is_empty() {
        return Err(Error::invalid("empty term subset"));
    }
    if cfg.layers == 0 || cfg.steps == 0 {
        return Err(Error::invalid("transport fit needs at least one layer and one step"));
    }
    let mut stack = Stack::new(task, terms, cfg);
    let mut opt = AdamW::new(&stack.store, GroupHypers::uniform(cfg.lr, 0.0));
    let mut rng = rng_from_seed(cfg.seed);
    let target = Rc::new(task.target_features.clone());
    let mut history = Vec::new();
    let every = cfg.log_every.max(1);

    let mut record = |step: usize, pred: &Matrix, mse: f64| {
        if step.is_multiple_of(every) || step == cfg.steps {
            history.push(TransportLog { step, mse, mass: pred.sum() });
        }
    };
    for step in 0..cfg.steps {
        let mut ctx = Ctx::new(true, &mut rng);
        let mut tape = Tape::new();
        let pred = stack.forward(&mut tape, task, &mut ctx)?;
        let loss = tape.mse(pred, Rc::clone(&target), None)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("transport fit loss {value} at step {step}")));
        }
        record(step, tape.value(pred), value);
        tape.backward(loss)?;
        stack.store.zero_grad();
        tape.accumulate_param_grads(&mut stack.store);
        drop(tape);
        opt.step(&mut stack.store)?;
    }
    let mut ctx = Ctx::eval(&mut rng);
    let mut tape = Tape::new();
    let pred = stack.forward(&mut tape, task, &mut ctx)?;
    let prediction = tape.value(pred).clone();
    let final_mse = prediction.sub(&task.target_features).as_slice().iter().map(|e| e * e).sum::<f64>()
        / prediction.len() as f64;
    record(cfg.steps, &prediction, final_mse);
    Ok(TransportFit { terms, final_mse, prediction, history })
}
