//! Window-by-window training of the forecaster.

use std::rc::Rc;

use super::config::{LossKind, TrainConfig};
use super::metrics::{Metrics, RegressionAccumulator};
use super::optim::AdamW;
use crate::adr::Ctx;
use crate::data::{chronological_split, make_windows, normalize_series, Normalizer, TemporalDataset, Window};
use crate::error::{Error, Result};
use crate::model::{time_embedding_matrix, AdrGnnTemporal, TemporalConfig};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tape::Tape;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct TemporalRun {
    pub model: AdrGnnTemporal,
    /// Metrics on the horizon windows, in the original units.
    pub test: Metrics,
    /// Mean training loss per epoch (normalized units).
    pub epoch_losses: Vec<f64>,
    pub normalizer: Option<Normalizer>,
    pub n_train_windows: usize,
    pub n_test_windows: usize,
}

/// Forward pass on one window in evaluation mode.
pub fn predict_window(model: &AdrGnnTemporal, graph: &crate::graph::Graph, w: &Window) -> Result<Matrix> {
    let t_emb = time_embedding_matrix(&w.frame_times, model.config.n_frequencies, graph.n_nodes())?;
    model.predict(graph, &w.input, &t_emb)
}

/// Metrics over `windows`, mapped back through `normalizer` when given.
pub fn evaluate_temporal(
    model: &AdrGnnTemporal,
    ds: &TemporalDataset,
    windows: &[Window],
    normalizer: Option<&Normalizer>,
) -> Result<Metrics> {
    if model.config.in_channels != ds.channels()
        || model.config.tau_in != ds.tau_in
        || model.config.tau_out != ds.tau_out
    {
        return Err(Error::shape(
            "evaluate_temporal",
            format!(
                "model expects {} channels with windows {}→{}, dataset has {} channels with {}→{}",
                model.config.in_channels,
                model.config.tau_in,
                model.config.tau_out,
                ds.channels(),
                ds.tau_in,
                ds.tau_out
            ),
        ));
    }
    let mut acc = RegressionAccumulator::default();
    for w in windows {
        let mut pred = predict_window(model, &ds.graph, w)?;
        let mut target = w.target.clone();
        if let Some(norm) = normalizer {
            pred = norm.inverse(&pred)?;
            target = norm.inverse(&target)?;
        }
        acc.add(&pred, &target)?;
    }
    acc.finish()
}

/// Splits the windows chronologically, takes one optimizer step per
/// training window for `cfg.epochs` epochs, then reports metrics on the
/// trailing horizon.
pub fn train_temporal(model_config: TemporalConfig, ds: &TemporalDataset, cfg: &TrainConfig) -> Result<TemporalRun> {
    cfg.validate()?;
    if ds.tau_in + ds.tau_out > ds.n_frames() {
        return Err(Error::invalid(format!(
            "tau_in + tau_out = {} exceeds the {} frames of {}",
            ds.tau_in + ds.tau_out,
            ds.n_frames(),
            ds.name
        )));
    }
    let (data, normalizer) = match cfg.normalize {
        Some(scheme) => {
            let (d, n) = normalize_series(ds, scheme)?;
            (d, Some(n))
        }
        None => (ds.clone(), None),
    };
    let windows = make_windows(&data)?;
    let (train, test) = chronological_split(&windows, cfg.train_fraction)?;
    let mut model = AdrGnnTemporal::new(model_config, cfg.seed)?;
    if model.config.out_channels != ds.channels() {
        return Err(Error::shape(
            "train_temporal",
            format!("model predicts {} channels, series has {}", model.config.out_channels, ds.channels()),
        ));
    }
    let mut opt = AdamW::new(&model.store, cfg.groups);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let n = data.n_nodes();
    let nf = model.config.n_frequencies;
    let t_embs: Vec<Matrix> =
        train.iter().map(|w| time_embedding_matrix(&w.frame_times, nf, n)).collect::<Result<_>>()?;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (w, t_emb) in train.iter().zip(&t_embs) {
            let mut ctx = Ctx::new(true, &mut rng);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &data.graph, &w.input, t_emb, &mut ctx)?;
            let target = Rc::new(w.target.clone());
            let loss = match cfg.loss {
                LossKind::Mae => tape.mae(out.predictions, target, None)?,
                _ => tape.mse(out.predictions, target, None)?,
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss {value} at epoch {epoch}, window {}", w.start)));
            }
            total += value;
            tape.backward(loss)?;
            model.store.zero_grad();
            tape.accumulate_param_grads(&mut model.store);
            ctx.apply_running_updates(&mut model.store);
            drop(tape);
            opt.step(&mut model.store)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    let test_metrics = evaluate_temporal(&model, &data, test, normalizer.as_ref())?;
    Ok(TemporalRun {
        model,
        test: test_metrics,
        epoch_losses,
        normalizer,
        n_train_windows: train.len(),
        n_test_windows: test.len(),
    })
}
