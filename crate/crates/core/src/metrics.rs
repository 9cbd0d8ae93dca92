//! Misclassification under label matching and bias/MSE summaries.

use pathfinding::kuhn_munkres::kuhn_munkres_min;
use pathfinding::matrix::Matrix;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionSummary {
    /// `confusion[t][p]` counts subjects with true label `t` predicted as `p`.
    pub confusion: Vec<Vec<usize>>,
    /// `matching[t]` is the predicted label paired with true label `t`.
    pub matching: Vec<usize>,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Misclassification {
    Comparable(ConfusionSummary),
    /// Estimated and true numbers of classes differ.
    NotComparable { k_true: usize, k_pred: usize },
}

impl Misclassification {
    pub fn rate(&self) -> Option<f64> {
        match self {
            Self::Comparable(c) => Some(c.rate),
            Self::NotComparable { .. } => None,
        }
    }
}

/// Error rate after the best one-to-one matching of predicted to true labels.
///
/// Labels must lie in `0..k_true` and `0..k_pred`.
pub fn misclassification(truth: &[usize], predicted: &[usize], k_true: usize, k_pred: usize) -> Result<Misclassification> {
    if truth.len() != predicted.len() {
        return Err(Error::Argument(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("no labels to compare".into()));
    }
    if let Some(bad) = truth.iter().find(|&&t| t >= k_true) {
        return Err(Error::Argument(format!("true label {bad} out of range 0..{k_true}")));
    }
    if let Some(bad) = predicted.iter().find(|&&p| p >= k_pred) {
        return Err(Error::Argument(format!("predicted label {bad} out of range 0..{k_pred}")));
    }
    if k_true != k_pred {
        return Ok(Misclassification::NotComparable { k_true, k_pred });
    }
    let k = k_true;
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let costs = Matrix::from_rows(
        confusion
            .iter()
            .map(|row| row.iter().map(|&c| -(c as i64)).collect::<Vec<_>>()),
    )
    .map_err(|e| Error::Numerical(format!("confusion matrix: {e}")))?;
    let (neg_agree, matching) = kuhn_munkres_min(&costs);
    let agree = (-neg_agree) as usize;
    let rate = (truth.len() - agree) as f64 / truth.len() as f64;
    Ok(Misclassification::Comparable(ConfusionSummary {
        confusion,
        matching,
        rate,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias_x100: f64,
    pub mse_x100: f64,
}

/// Per-parameter mean, bias and MSE (the last two times 100) over
/// replications. `None` when no replication is available.
pub fn bias_mse_table(estimates: &[Vec<f64>], truth: &[f64], names: &[String]) -> Result<Option<Vec<ParameterSummary>>> {
    if names.len() != truth.len() {
        return Err(Error::Argument("parameter names and true values differ in length".into()));
    }
    if estimates.is_empty() {
        return Ok(None);
    }
    if let Some(e) = estimates.iter().find(|e| e.len() != truth.len()) {
        return Err(Error::Argument(format!(
            "estimate vector of length {} for {} parameters",
            e.len(),
            truth.len()
        )));
    }
    let r = estimates.len() as f64;
    Ok(Some(
        truth
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / r;
                let mse = estimates.iter().map(|e| (e[j] - t).powi(2)).sum::<f64>() / r;
                ParameterSummary {
                    name: names[j].clone(),
                    truth: t,
                    mean,
                    bias_x100: 100.0 * (mean - t),
                    mse_x100: 100.0 * mse,
                }
            })
            .collect(),
    ))
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Counts of each selected number of components.
pub fn selection_histogram(selected: &[usize]) -> Vec<(usize, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for &k in selected {
        *counts.entry(k).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rate(t: &[usize], p: &[usize], k: usize) -> f64 {
        misclassification(t, p, k, k).unwrap().rate().unwrap()
    }

    #[test]
    fn examples() {
        assert_eq!(rate(&[0, 1, 1, 0], &[0, 1, 1, 0], 2), 0.0);
        assert_eq!(rate(&[0, 1, 1, 0], &[1, 0, 0, 1], 2), 0.0);
        let t = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let p = [2, 2, 2, 0, 0, 1, 1, 1, 1, 1];
        assert!((rate(&t, &p, 3) - 0.1).abs() < 1e-15);
        assert!(matches!(
            misclassification(&[0, 1], &[0, 0], 2, 1).unwrap(),
            Misclassification::NotComparable { k_true: 2, k_pred: 1 }
        ));
    }

    #[test]
    fn confusion_counts_sum_to_size() {
        let m = misclassification(&[0, 1, 2, 1], &[1, 1, 0, 2], 3, 3).unwrap();
        let Misclassification::Comparable(c) = m else { panic!() };
        assert_eq!(c.confusion.iter().flatten().sum::<usize>(), 4);
    }

    #[test]
    fn bias_mse_examples() {
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let truth = [1.0, -2.0];
        let exact = bias_mse_table(&vec![truth.to_vec(); 3], &truth, &names).unwrap().unwrap();
        assert!(exact.iter().all(|s| s.bias_x100 == 0.0 && s.mse_x100 == 0.0));

        let delta = 0.3;
        let est = vec![vec![1.0 + delta, -2.0 - delta], vec![1.0 - delta, -2.0 + delta]];
        for s in bias_mse_table(&est, &truth, &names).unwrap().unwrap() {
            assert!(s.bias_x100.abs() < 1e-12);
            assert!((s.mse_x100 - 100.0 * delta * delta).abs() < 1e-12);
        }
        assert_eq!(bias_mse_table(&[], &truth, &names).unwrap(), None);
    }

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[0.0, 1.0], 0.975), Some(0.975));
        assert_eq!(quantile(&[], 0.5), None);
        assert_eq!(selection_histogram(&[2, 3, 2]), vec![(2, 2), (3, 1)]);
    }

    proptest! {
        #[test]
        fn permutation_invariance(
            labels in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
            perm_idx in 0usize..24,
        ) {
            let mut perm = vec![0, 1, 2, 3];
            // decode perm_idx as a Lehmer code
            let mut code = perm_idx;
            let mut out = Vec::new();
            for base in (1..=4).rev() {
                out.push(perm.remove(code % base));
                code /= base;
            }
            let truth: Vec<usize> = labels.iter().map(|l| l.0).collect();
            let pred: Vec<usize> = labels.iter().map(|l| l.1).collect();
            let permuted: Vec<usize> = pred.iter().map(|&p| out[p]).collect();
            prop_assert_eq!(rate(&truth, &pred, 4), rate(&truth, &permuted, 4));
        }

        #[test]
        fn mse_is_bias_squared_plus_variance(
            xs in proptest::collection::vec(-10.0f64..10.0, 1..40),
            t in -5.0f64..5.0,
        ) {
            let est: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            let s = &bias_mse_table(&est, &[t], &["x".into()]).unwrap().unwrap()[0];
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            let bias = mean - t;
            prop_assert!((s.mse_x100 / 100.0 - (bias * bias + var)).abs() < 1e-10);
        }
    }
}
