//! Depth/energy sweep, term ablation, and random hyperparameter search.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ModelKind, TrainConfig, CHANNEL_CHOICES, DROPOUT_RANGE, LAYER_CHOICES, LR_RANGE, STEP_RANGE, WEIGHT_DECAY_RANGE};
use super::metrics::{mean_std, MeanStd};
use super::node::{hidden_energies, node_model_config, train_node_classification, NodeRun, SplitPart};
use crate::adr::Terms;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::rng::{rng_from_seed, uniform, DetRng};

pub const DEPTHS: [usize; 6] = [2, 4, 8, 16, 32, 64];

/// The seven nonempty subsets of {A, D, R}, singles first.
pub fn term_subsets() -> Vec<Terms> {
    ["A", "D", "R", "AD", "AR", "DR", "ADR"].iter().map(|s| Terms::parse(s).expect("valid subset")).collect()
}

/// Trains one model per split (in parallel, each independently seeded) and
/// returns the runs in split order.
pub fn train_splits(bundle: &DatasetBundle, cfg: &TrainConfig, splits: &[usize]) -> Result<Vec<NodeRun>> {
    let model = node_model_config(bundle, cfg);
    splits.par_iter().map(|&s| train_node_classification(model.clone(), bundle, s, cfg)).collect()
}

fn test_accuracies(runs: &[NodeRun]) -> Vec<f64> {
    runs.iter().map(|r| r.test.accuracy.unwrap_or(f64::NAN)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub model: ModelKind,
    pub depth: usize,
    pub accuracy: MeanStd,
    /// `E(U^(l)) / E(U^(0))` for `l = 0..=depth`, averaged over splits.
    pub relative_energy: Vec<f64>,
}

/// For every depth, trains the ADR model and the convolution baseline on
/// each split and records test accuracy and the relative Dirichlet energy
/// of the hidden states.
pub fn depth_energy_study(
    bundle: &DatasetBundle,
    depths: &[usize],
    cfg: &TrainConfig,
    splits: &[usize],
) -> Result<Vec<DepthRow>> {
    if splits.is_empty() || depths.is_empty() {
        return Err(Error::invalid("depth study needs at least one depth and one split"));
    }
    let mut rows = Vec::new();
    for &depth in depths {
        for kind in [ModelKind::Adr, ModelKind::Gcn] {
            let c = TrainConfig { layers: depth, model: kind, ..cfg.clone() };
            let runs = train_splits(bundle, &c, splits)?;
            let mut energy = vec![0.0; depth + 1];
            for r in &runs {
                let report = hidden_energies(&r.model, bundle)?;
                for (acc, e) in energy.iter_mut().zip(&report.relative_energy) {
                    *acc += e / runs.len() as f64;
                }
            }
            let accuracy = mean_std(&test_accuracies(&runs));
            log::info!("depth {depth} {kind:?}: accuracy {:.4}, final relative energy {:.3e}", accuracy.mean, energy[depth]);
            rows.push(DepthRow { model: kind, depth, accuracy, relative_energy: energy });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub terms: Terms,
    pub accuracy: MeanStd,
    pub per_split: Vec<f64>,
}

pub fn ablation_study(
    bundle: &DatasetBundle,
    subsets: &[Terms],
    cfg: &TrainConfig,
    splits: &[usize],
) -> Result<Vec<AblationRow>> {
    if subsets.is_empty() || splits.is_empty() {
        return Err(Error::invalid("ablation needs at least one subset and one split"));
    }
    let mut rows = Vec::new();
    for &terms in subsets {
        if terms.is_empty() {
            return Err(Error::invalid("empty term subset"));
        }
        let c = TrainConfig { terms, model: ModelKind::Adr, ..cfg.clone() };
        let per_split = test_accuracies(&train_splits(bundle, &c, splits)?);
        let accuracy = mean_std(&per_split);
        log::info!("terms {}: accuracy {:.4} ± {:.4}", terms.label(), accuracy.mean, accuracy.std);
        rows.push(AblationRow { terms, accuracy, per_split });
    }
    Ok(rows)
}

fn log_uniform(rng: &mut DetRng, (lo, hi): (f64, f64)) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
}

/// Draws learning rates log-uniformly, decays, dropouts and step size
/// uniformly, batch norm, layers and channels uniformly from their choices;
/// everything else is copied from `base`.
pub fn sample_config(base: &TrainConfig, rng: &mut DetRng) -> TrainConfig {
    let mut c = base.clone();
    for g in ParamGroup::ALL {
        c.groups.get_mut(g).lr = log_uniform(rng, LR_RANGE);
    }
    for g in ParamGroup::ALL {
        c.groups.get_mut(g).weight_decay = uniform(rng, WEIGHT_DECAY_RANGE.0, WEIGHT_DECAY_RANGE.1);
    }
    c.dropout = uniform(rng, DROPOUT_RANGE.0, DROPOUT_RANGE.1);
    c.hidden_dropout = uniform(rng, DROPOUT_RANGE.0, DROPOUT_RANGE.1);
    c.batch_norm = rng.random::<bool>();
    c.h = uniform(rng, STEP_RANGE.0, STEP_RANGE.1);
    c.layers = LAYER_CHOICES[rng.random_range(0..LAYER_CHOICES.len())];
    c.hidden = CHANNEL_CHOICES[rng.random_range(0..CHANNEL_CHOICES.len())];
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: TrainConfig,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_index: usize,
    pub best: TrainConfig,
    pub trials: Vec<Trial>,
}

/// Random search over the tuned ranges on one split, ranked by validation
/// accuracy (first trial wins ties).
pub fn grid_search(
    bundle: &DatasetBundle,
    base: &TrainConfig,
    budget: usize,
    seed: u64,
    split: usize,
) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::invalid("search budget must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let configs: Vec<TrainConfig> = (0..budget).map(|_| sample_config(base, &mut rng)).collect();
    for c in &configs {
        c.check_ranges()?;
    }
    let trials = configs
        .into_par_iter()
        .enumerate()
        .map(|(index, config)| {
            let run = train_node_classification(node_model_config(bundle, &config), bundle, split, &config)?;
            let test_accuracy = super::node::evaluate_node(&run.model, bundle, split, SplitPart::Test)?
                .accuracy
                .unwrap_or(f64::NAN);
            Ok(Trial { index, config, val_accuracy: run.best_val_accuracy, test_accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best_index = 0;
    for t in &trials {
        if t.val_accuracy > trials[best_index].val_accuracy {
            best_index = t.index;
        }
    }
    Ok(SearchResult { best_index, best: trials[best_index].config.clone(), trials })
}
