//! Customization objective: cross-entropy plus branch load balancing.

use super::head::GateDecision;
use crate::error::{contract, Result};
use crate::numerics::{Graph, Real, Var};

/// Default weight of the balance term.
pub const DEFAULT_LAMBDA_BALANCE: f64 = 0.01;

/// `K * sum_k (mean_k - 1/K)^2` over a batch of simplex points.
pub fn balance_loss(alpha: &[&[f64]], k: usize) -> Result<f64> {
    if alpha.is_empty() {
        return Err(contract("balance loss of an empty batch"));
    }
    if k == 0 || alpha.iter().any(|a| a.len() != k) {
        return Err(contract(format!("every gate vector must have {k} entries")));
    }
    let n = alpha.len() as f64;
    let mut s = 0.0;
    for j in 0..k {
        let mean = alpha.iter().map(|a| a[j]).sum::<f64>() / n;
        s += (mean - 1.0 / k as f64).powi(2);
    }
    Ok(k as f64 * s)
}

/// Graph version of [`balance_loss`] for an `n x K` weight matrix.
pub fn balance_loss_graph<T: Real>(g: &mut Graph<T>, alpha: Var) -> Result<Var> {
    let shape = g.value(alpha).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(contract("balance loss of an empty batch"));
    }
    let k = shape[1] as f64;
    let mean = g.col_mean(alpha);
    let dev = g.add_scalar(mean, -1.0 / k);
    let sq = g.square(dev);
    let s = g.sum_all(sq);
    Ok(g.scale(s, k))
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(contract(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct CustomTerms {
    pub ce: Var,
    pub balance: Option<Var>,
    pub total: Var,
}

/// `L_CE + lambda * L_balance`; the balance term is present only for gated heads.
pub fn customize_loss_graph<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    alpha: Option<Var>,
    labels: &[usize],
    lambda_balance: f64,
) -> Result<CustomTerms> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(contract("logits and labels disagree in batch size"));
    }
    check_labels(labels, shape[1])?;
    let ce = g.cross_entropy(logits, labels);
    let (balance, total) = match alpha {
        Some(a) => {
            let b = balance_loss_graph(g, a)?;
            let w = g.scale(b, lambda_balance);
            (Some(b), g.add(ce, w))
        }
        None => (None, ce),
    };
    Ok(CustomTerms { ce, balance, total })
}

/// `L_custom` evaluated from finished decisions.
pub fn customize_loss(decisions: &[GateDecision], labels: &[usize], lambda_balance: f64) -> Result<f64> {
    if decisions.is_empty() || decisions.len() != labels.len() {
        return Err(contract("decisions and labels disagree in batch size"));
    }
    let k = decisions[0].logits.len();
    check_labels(labels, k)?;
    let mut ce = 0.0;
    for (d, &y) in decisions.iter().zip(labels) {
        let max = d.logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + d.logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        ce += lse - d.logits[y] as f64;
    }
    ce /= decisions.len() as f64;
    let alphas: Vec<&[f64]> = decisions.iter().map(|d| d.alpha.as_slice()).collect();
    Ok(ce + lambda_balance * balance_loss(&alphas, 2)?)
}
