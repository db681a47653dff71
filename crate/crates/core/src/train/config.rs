use serde::{Deserialize, Serialize};

use super::optim::GroupHypers;
use crate::adr::{DiffusionScheme, Terms};
use crate::cg::CgSettings;
use crate::data::NormScheme;
use crate::error::{Error, Result};
use crate::model::{GcnConfig, StaticConfig, TemporalConfig, DEFAULT_FREQUENCIES};
use crate::params::ParamGroup;

pub const LR_RANGE: (f64, f64) = (1e-4, 1e-1);
pub const WEIGHT_DECAY_RANGE: (f64, f64) = (0.0, 1e-2);
pub const DROPOUT_RANGE: (f64, f64) = (0.0, 0.9);
pub const STEP_RANGE: (f64, f64) = (1e-3, 1.0);
pub const LAYER_CHOICES: [usize; 6] = [2, 4, 8, 16, 32, 64];
pub const CHANNEL_CHOICES: [usize; 6] = [8, 16, 32, 64, 128, 256];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    Mse,
    Mae,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Adr,
    Gcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub groups: GroupHypers,
    /// Dropout on the input features and before the head.
    pub dropout: f64,
    /// Dropout on hidden states before every layer.
    pub hidden_dropout: f64,
    pub h: f64,
    pub layers: usize,
    pub hidden: usize,
    pub batch_norm: bool,
    pub epochs: usize,
    /// Epochs without a new best validation accuracy before stopping.
    pub patience: usize,
    pub seed: u64,
    pub cg_iterations: usize,
    pub loss: LossKind,
    pub terms: Terms,
    pub scheme: DiffusionScheme,
    pub tau_in: usize,
    pub tau_out: usize,
    pub n_frequencies: usize,
    /// Fraction of windows used for training; the rest is the horizon.
    pub train_fraction: f64,
    pub normalize: Option<NormScheme>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Adr,
            groups: GroupHypers::default(),
            dropout: 0.5,
            hidden_dropout: 0.5,
            h: 0.5,
            layers: 4,
            hidden: 64,
            batch_norm: false,
            epochs: 1500,
            patience: 200,
            seed: 0,
            cg_iterations: 5,
            loss: LossKind::CrossEntropy,
            terms: Terms::ALL,
            scheme: DiffusionScheme::Implicit,
            tau_in: 4,
            tau_out: 1,
            n_frequencies: DEFAULT_FREQUENCIES,
            train_fraction: 0.9,
            normalize: None,
        }
    }
}

fn outside(v: f64, (lo, hi): (f64, f64)) -> bool {
    !(lo..=hi).contains(&v)
}

impl TrainConfig {
    /// Defaults for forecasting: MSE loss, 100 epochs, no dropout.
    pub fn temporal() -> Self {
        Self {
            loss: LossKind::Mse,
            epochs: 100,
            dropout: 0.0,
            hidden_dropout: 0.0,
            hidden: 32,
            layers: 2,
            ..Self::default()
        }
    }

    /// Hard errors: values no run can use.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.layers == 0 || self.hidden == 0 || self.cg_iterations == 0 {
            return Err(Error::invalid("epochs, layers, hidden and cg_iterations must be positive"));
        }
        for d in [self.dropout, self.hidden_dropout] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::invalid(format!("dropout {d} outside [0, 1)")));
            }
        }
        for g in ParamGroup::ALL {
            let h = self.groups.get(g);
            if !(h.lr > 0.0 && h.lr.is_finite()) || !(h.weight_decay >= 0.0 && h.weight_decay.is_finite()) {
                return Err(Error::invalid(format!("{g} learning rate / weight decay {h:?} invalid")));
            }
        }
        if !(0.0..1.0).contains(&self.train_fraction) {
            return Err(Error::invalid(format!("train_fraction {} outside [0, 1)", self.train_fraction)));
        }
        Ok(())
    }

    /// Departures from the tuned hyperparameter ranges.
    pub fn range_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        for g in ParamGroup::ALL {
            let h = self.groups.get(g);
            if outside(h.lr, LR_RANGE) {
                w.push(format!("{g} learning rate {} outside [{}, {}]", h.lr, LR_RANGE.0, LR_RANGE.1));
            }
            if outside(h.weight_decay, WEIGHT_DECAY_RANGE) {
                w.push(format!(
                    "{g} weight decay {} outside [{}, {}]",
                    h.weight_decay, WEIGHT_DECAY_RANGE.0, WEIGHT_DECAY_RANGE.1
                ));
            }
        }
        for (name, d) in [("dropout", self.dropout), ("hidden_dropout", self.hidden_dropout)] {
            if outside(d, DROPOUT_RANGE) {
                w.push(format!("{name} {d} outside [{}, {}]", DROPOUT_RANGE.0, DROPOUT_RANGE.1));
            }
        }
        if outside(self.h, STEP_RANGE) {
            w.push(format!("step size {} outside [{}, {}]", self.h, STEP_RANGE.0, STEP_RANGE.1));
        }
        if !LAYER_CHOICES.contains(&self.layers) {
            w.push(format!("layers {} not in {LAYER_CHOICES:?}", self.layers));
        }
        if !CHANNEL_CHOICES.contains(&self.hidden) {
            w.push(format!("channels {} not in {CHANNEL_CHOICES:?}", self.hidden));
        }
        w
    }

    pub fn check_ranges(&self) -> Result<()> {
        match self.range_warnings().first() {
            None => Ok(()),
            Some(first) => Err(Error::invalid(first.clone())),
        }
    }

    fn cg(&self) -> CgSettings {
        CgSettings { iterations: self.cg_iterations, ..CgSettings::default() }
    }

    pub fn static_config(&self, in_channels: usize, out_channels: usize) -> StaticConfig {
        StaticConfig {
            h: self.h,
            dropout: self.dropout,
            hidden_dropout: Some(self.hidden_dropout),
            batch_norm: self.batch_norm,
            cg: self.cg(),
            terms: self.terms,
            scheme: self.scheme,
            ..StaticConfig::new(in_channels, self.hidden, out_channels, self.layers)
        }
    }

    pub fn gcn_config(&self, in_channels: usize, out_channels: usize) -> GcnConfig {
        GcnConfig { in_channels, hidden: self.hidden, out_channels, layers: self.layers, dropout: self.dropout }
    }

    pub fn temporal_config(&self, in_channels: usize) -> TemporalConfig {
        TemporalConfig {
            out_channels: in_channels,
            h: self.h,
            dropout: self.dropout,
            hidden_dropout: Some(self.hidden_dropout),
            batch_norm: self.batch_norm,
            n_frequencies: self.n_frequencies,
            cg: self.cg(),
            terms: self.terms,
            scheme: self.scheme,
            ..TemporalConfig::new(in_channels, self.hidden, self.tau_in, self.tau_out, self.layers)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_in_range() {
        assert!(TrainConfig::default().range_warnings().is_empty());
        assert!(TrainConfig::temporal().range_warnings().is_empty());
    }

    #[test]
    fn warnings_name_the_field() {
        let mut c = TrainConfig::default();
        c.groups.diffusion.lr = 0.5;
        c.layers = 3;
        let w = c.range_warnings();
        assert_eq!(w.len(), 2);
        assert!(w[0].contains("diffusion learning rate"));
        assert!(c.check_ranges().is_err());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"layers": 8, "terms": "AD", "groups": {"reaction": {"lr": 0.01, "weight_decay": 0}}}"#).unwrap();
        assert_eq!(c.layers, 8);
        assert_eq!(c.terms, Terms::parse("AD").unwrap());
        assert_eq!(c.groups.reaction.lr, 0.01);
        assert_eq!(c.groups.embedding, Default::default());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"layerz": 8}"#).is_err());
    }
}
