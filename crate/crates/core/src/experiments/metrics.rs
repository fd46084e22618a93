//! Classification metrics with macro averaging.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `k x k` counts indexed `[true][predicted]`.
pub fn confusion(labels: &[usize], preds: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != preds.len() {
        return Err(contract("labels and predictions differ in length"));
    }
    let mut m = vec![vec![0usize; k]; k];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= k || p >= k {
            return Err(contract(format!("class index out of range for {k} classes")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Accuracy plus macro precision, recall and F1 over all `k` classes.
/// A class with no predictions (or no members) contributes 0 to the
/// corresponding average.
pub fn compute_metrics(labels: &[usize], preds: &[usize], k: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(contract("metrics of an empty evaluation set"));
    }
    let m = confusion(labels, preds, k)?;
    let correct: usize = (0..k).map(|i| m[i][i]).sum();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = m[c][c] as f64;
        let predicted: usize = (0..k).map(|i| m[i][c]).sum();
        let actual: usize = m[c].iter().sum();
        let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let kf = k as f64;
    Ok(Metrics {
        accuracy: correct as f64 / labels.len() as f64,
        precision: p_sum / kf,
        recall: r_sum / kf,
        f1: f_sum / kf,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}
