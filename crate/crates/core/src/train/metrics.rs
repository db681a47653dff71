//! Classification and regression metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Targets with `|y|` below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-8;

/// Every field is optional so one type covers both task kinds; `mape_excluded`
/// counts the near-zero targets skipped by MAPE.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mape: Option<f64>,
    #[serde(default)]
    pub mape_excluded: usize,
}

impl Metrics {
    /// `(name, value)` for every reported metric, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let fields = [
            ("loss", self.loss),
            ("accuracy", self.accuracy),
            ("roc_auc", self.roc_auc),
            ("mse", self.mse),
            ("rmse", self.rmse),
            ("mae", self.mae),
            ("mape", self.mape),
        ];
        for (name, v) in fields {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Matrix, labels: &[usize], mask: &[bool]) -> Result<f64> {
    if labels.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::shape("accuracy", format!("{} rows, {} labels", logits.rows(), labels.len())));
    }
    let pred = argmax_rows(logits);
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::invalid("accuracy over an empty mask"));
    }
    Ok(rows.iter().filter(|&&i| pred[i] == labels[i]).count() as f64 / rows.len() as f64)
}

/// Area under the ROC curve by the rank statistic with tied ranks averaged.
/// `None` when one class is absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| positive[order[k]]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Accuracy over `mask`, plus ROC-AUC on the class-1 probability margin for
/// two-class problems.
pub fn classification_metrics(logits: &Matrix, labels: &[usize], mask: &[bool]) -> Result<Metrics> {
    let acc = accuracy(logits, labels, mask)?;
    let roc_auc = if logits.cols() == 2 {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
        let scores: Vec<f64> = rows.iter().map(|&i| logits.get(i, 1) - logits.get(i, 0)).collect();
        let positive: Vec<bool> = rows.iter().map(|&i| labels[i] == 1).collect();
        roc_auc(&scores, &positive)
    } else {
        None
    };
    Ok(Metrics { accuracy: Some(acc), roc_auc, ..Metrics::default() })
}

/// Accumulates squared, absolute and percentage errors over many batches.
#[derive(Clone, Debug, Default)]
pub struct RegressionAccumulator {
    sq: f64,
    abs: f64,
    pct: f64,
    count: usize,
    pct_count: usize,
    excluded: usize,
}

impl RegressionAccumulator {
    pub fn add(&mut self, pred: &Matrix, target: &Matrix) -> Result<()> {
        if !pred.same_shape(target) {
            return Err(Error::shape("regression_metrics", format!("{:?} vs {:?}", pred.shape(), target.shape())));
        }
        for (&p, &y) in pred.as_slice().iter().zip(target.as_slice()) {
            let e = p - y;
            self.sq += e * e;
            self.abs += e.abs();
            self.count += 1;
            if y.abs() < MAPE_FLOOR {
                self.excluded += 1;
            } else {
                self.pct += (e / y).abs();
                self.pct_count += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::invalid("regression metrics over zero values"));
        }
        let mse = self.sq / self.count as f64;
        Ok(Metrics {
            mse: Some(mse),
            rmse: Some(mse.sqrt()),
            mae: Some(self.abs / self.count as f64),
            mape: (self.pct_count > 0).then(|| self.pct / self.pct_count as f64),
            mape_excluded: self.excluded,
            ..Metrics::default()
        })
    }
}

pub fn regression_metrics(pred: &Matrix, target: &Matrix) -> Result<Metrics> {
    let mut acc = RegressionAccumulator::default();
    acc.add(pred, target)?;
    acc.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: f64::NAN, std: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    MeanStd { mean, std: var.sqrt(), n }
}

/// Per-metric mean and deviation across runs (splits or repetitions).
pub fn summarize(runs: &[Metrics]) -> BTreeMap<String, MeanStd> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in runs {
        for (name, v) in m.pairs() {
            values.entry(name.to_string()).or_default().push(v);
        }
    }
    values.into_iter().map(|(k, v)| (k, mean_std(&v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_pick_lowest_class() {
        let l = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 2.0]]);
        assert_eq!(argmax_rows(&l), vec![0, 1]);
    }

    #[test]
    fn perfect_and_wrong_predictors() {
        let l = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![1.0, -1.0]]);
        let all = [true; 3];
        assert_eq!(accuracy(&l, &[0, 1, 0], &all).unwrap(), 1.0);
        assert_eq!(accuracy(&l, &[1, 0, 1], &all).unwrap(), 0.0);
        assert_eq!(accuracy(&l, &[0, 0, 0], &[false, true, false]).unwrap(), 0.0);
        assert!(accuracy(&l, &[0, 0, 0], &[false; 3]).is_err());
        let m = regression_metrics(&l, &l).unwrap();
        assert_eq!((m.mse, m.mae), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn regression_by_hand() {
        let p = Matrix::column(&[1.0, 2.0, 0.5]);
        let y = Matrix::column(&[2.0, 0.0, 1.0]);
        let m = regression_metrics(&p, &y).unwrap();
        assert!((m.mse.unwrap() - (1.0 + 4.0 + 0.25) / 3.0).abs() < 1e-15);
        assert!((m.mae.unwrap() - 3.5 / 3.0).abs() < 1e-15);
        assert!((m.mape.unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(m.mape_excluded, 1);
        assert!((m.rmse.unwrap().powi(2) - m.mse.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_by_hand() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(roc_auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(roc_auc(&[0.5], &[true]), None);
    }

    #[test]
    fn population_std() {
        let s = mean_std(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
