//! Full-batch node classification with early stopping.

use serde::{Deserialize, Serialize};

use super::config::{LossKind, ModelKind, TrainConfig};
use super::metrics::{accuracy, classification_metrics, Metrics};
use super::optim::AdamW;
use crate::adr::Ctx;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct NodeRun {
    /// Parameters restored to the best-validation epoch.
    pub model: Model,
    pub test: Metrics,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Logits and the hidden states after the embedding and each layer.
pub(crate) fn node_forward<'g>(
    model: &Model,
    tape: &mut Tape<'g>,
    graph: &'g Graph,
    x: &Matrix,
    ctx: &mut Ctx<'_>,
) -> Result<(Var, Vec<Var>)> {
    match model {
        Model::Static(m) => m.forward(tape, graph, x, ctx).map(|o| (o.logits, o.hidden)),
        Model::Gcn(m) => m.forward(tape, graph, x, ctx).map(|o| (o.logits, o.hidden)),
        Model::Temporal(_) => Err(Error::invalid("a temporal model cannot classify nodes")),
    }
}

/// The node-classification model `cfg` describes for this bundle.
pub fn node_model_config(bundle: &DatasetBundle, cfg: &TrainConfig) -> ModelConfig {
    let (ci, co) = (bundle.features.cols(), bundle.n_classes());
    match cfg.model {
        ModelKind::Adr => ModelConfig::Static(cfg.static_config(ci, co)),
        ModelKind::Gcn => ModelConfig::Gcn(cfg.gcn_config(ci, co)),
    }
}

fn mask_of(bundle: &DatasetBundle, split: usize, part: SplitPart) -> Result<&[bool]> {
    let s = bundle
        .splits
        .get(split)
        .ok_or_else(|| Error::invalid(format!("split {split} out of range ({} splits)", bundle.splits.len())))?;
    Ok(match part {
        SplitPart::Train => &s.train,
        SplitPart::Val => &s.val,
        SplitPart::Test => &s.test,
    })
}

fn labels_of(bundle: &DatasetBundle) -> Result<&[usize]> {
    bundle.labels.as_deref().ok_or_else(|| Error::invalid(format!("dataset {} has no labels", bundle.name)))
}

fn eval_logits(model: &Model, bundle: &DatasetBundle) -> Result<Matrix> {
    let mut rng = rng_from_seed(0);
    let mut ctx = Ctx::eval(&mut rng);
    let mut tape = Tape::new();
    let (logits, _) = node_forward(model, &mut tape, &bundle.graph, &bundle.features, &mut ctx)?;
    Ok(tape.value(logits).clone())
}

/// Evaluation-mode metrics of `model` on one part of one split.
pub fn evaluate_node(model: &Model, bundle: &DatasetBundle, split: usize, part: SplitPart) -> Result<Metrics> {
    check_shapes(model, bundle)?;
    let logits = eval_logits(model, bundle)?;
    classification_metrics(&logits, labels_of(bundle)?, mask_of(bundle, split, part)?)
}

fn check_shapes(model: &Model, bundle: &DatasetBundle) -> Result<()> {
    let (ci, co) = match model.config() {
        ModelConfig::Static(c) => (c.in_channels, c.out_channels),
        ModelConfig::Gcn(c) => (c.in_channels, c.out_channels),
        ModelConfig::Temporal(_) => return Err(Error::invalid("a temporal model cannot classify nodes")),
    };
    if ci != bundle.features.cols() || co < bundle.n_classes() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "model maps {ci} → {co}, dataset has {} features and {} classes",
                bundle.features.cols(),
                bundle.n_classes()
            ),
        ));
    }
    Ok(())
}

/// Minimizes masked cross-entropy on the training nodes of `split`. After
/// every epoch the model is evaluated on the validation nodes. An epoch
/// improves on the best so far with higher validation accuracy, or equal
/// accuracy and lower validation loss; the best parameters are restored at
/// the end, and training stops once `patience` epochs pass without
/// improvement.
pub fn train_node_classification(
    model_config: ModelConfig,
    bundle: &DatasetBundle,
    split: usize,
    cfg: &TrainConfig,
) -> Result<NodeRun> {
    cfg.validate()?;
    if cfg.loss != LossKind::CrossEntropy {
        log::warn!("node classification always uses cross-entropy; ignoring loss {:?}", cfg.loss);
    }
    let labels = labels_of(bundle)?;
    let train_mask = mask_of(bundle, split, SplitPart::Train)?;
    let val_mask = mask_of(bundle, split, SplitPart::Val)?;
    if !train_mask.iter().any(|&b| b) {
        return Err(Error::invalid(format!("split {split} has an empty training mask")));
    }
    let has_val = val_mask.iter().any(|&b| b);

    let seed = derive_seed(cfg.seed, split as u64);
    let mut model = Model::build(model_config, seed)?;
    check_shapes(&model, bundle)?;
    let mut opt = AdamW::new(model.store(), cfg.groups);
    let mut rng = rng_from_seed(derive_seed(seed, 1));

    let mut best = (f64::NEG_INFINITY, f64::INFINITY, 0usize, model.store().snapshot());
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let loss = {
            let mut ctx = Ctx::new(true, &mut rng);
            let mut tape = Tape::new();
            let (logits, _) = node_forward(&model, &mut tape, &bundle.graph, &bundle.features, &mut ctx)?;
            let loss = tape.cross_entropy(logits, labels, train_mask)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss {value} at epoch {epoch}")));
            }
            tape.backward(loss)?;
            let store = model.store_mut();
            store.zero_grad();
            tape.accumulate_param_grads(store);
            ctx.apply_running_updates(store);
            value
        };
        opt.step(model.store_mut())?;

        let logits = eval_logits(&model, bundle)?;
        let train_accuracy = accuracy(&logits, labels, train_mask)?;
        let (val_accuracy, val_loss) = if has_val {
            (accuracy(&logits, labels, val_mask)?, masked_cross_entropy(&logits, labels, val_mask)?)
        } else {
            (train_accuracy, loss)
        };
        history.push(EpochLog { epoch, loss, train_accuracy, val_accuracy, val_loss });
        if val_accuracy > best.0 || (val_accuracy == best.0 && val_loss < best.1) {
            best = (val_accuracy, val_loss, epoch, model.store().snapshot());
        } else if epoch - best.2 >= cfg.patience {
            log::debug!("early stop at epoch {epoch}, best {} at {}", best.0, best.2);
            break;
        }
    }
    model.store_mut().restore(&best.3);
    let test = evaluate_node(&model, bundle, split, SplitPart::Test)?;
    Ok(NodeRun { model, test, best_val_accuracy: best.0, best_epoch: best.2, history })
}

fn masked_cross_entropy(logits: &Matrix, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels, mask)?;
    Ok(tape.value(loss).item())
}

/// Cross-entropy of a freshly initialized model in evaluation mode.
pub fn initial_loss(model_config: ModelConfig, bundle: &DatasetBundle, split: usize, seed: u64) -> Result<f64> {
    let model = Model::build(model_config, seed)?;
    let logits = eval_logits(&model, bundle)?;
    masked_cross_entropy(&logits, labels_of(bundle)?, mask_of(bundle, split, SplitPart::Train)?)
}

/// Dirichlet energy of every hidden state of a trained model, relative to
/// the energy after the embedding.
pub fn hidden_energies(model: &Model, bundle: &DatasetBundle) -> Result<crate::graph::EnergyReport> {
    let mut rng = rng_from_seed(0);
    let mut ctx = Ctx::eval(&mut rng);
    let mut tape = Tape::new();
    let (_, hidden) = node_forward(model, &mut tape, &bundle.graph, &bundle.features, &mut ctx)?;
    let states: Vec<Matrix> = hidden.iter().map(|&v| tape.value(v).clone()).collect();
    crate::graph::EnergyReport::measure(&bundle.graph, &states)
}
