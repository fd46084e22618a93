//! Gate behavior on easy versus hard-but-fixed samples.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Mean context weight per group; `None` marks an empty group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub n: usize,
    pub mean_alpha_context: f64,
    pub min_alpha_context: f64,
    pub max_alpha_context: f64,
    pub n_easy: usize,
    pub easy_alpha_context: Option<f64>,
    pub n_hard_fixed: usize,
    pub hard_fixed_alpha_context: Option<f64>,
}

/// Splits samples into easy (baseline correct) and hard-but-fixed (baseline
/// wrong, gated model correct) and averages the gated model's context weight.
pub fn gate_diagnostics(
    labels: &[usize],
    baseline_pred: &[usize],
    gated_pred: &[usize],
    alpha_context: &[f64],
) -> Result<GateSummary> {
    let n = labels.len();
    if baseline_pred.len() != n || gated_pred.len() != n || alpha_context.len() != n {
        return Err(contract("diagnostic inputs must cover the same samples"));
    }
    if n == 0 {
        return Err(contract("no samples to diagnose"));
    }
    let (mut easy, mut hard) = (Vec::new(), Vec::new());
    for i in 0..n {
        if baseline_pred[i] == labels[i] {
            easy.push(alpha_context[i]);
        } else if gated_pred[i] == labels[i] {
            hard.push(alpha_context[i]);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(GateSummary {
        n,
        mean_alpha_context: alpha_context.iter().sum::<f64>() / n as f64,
        min_alpha_context: alpha_context.iter().copied().fold(f64::INFINITY, f64::min),
        max_alpha_context: alpha_context.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        n_easy: easy.len(),
        easy_alpha_context: mean(&easy),
        n_hard_fixed: hard.len(),
        hard_fixed_alpha_context: mean(&hard),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_leaves_hard_group_empty() {
        let y = [0, 1, 2, 0];
        let p = [0, 2, 2, 1];
        let s = gate_diagnostics(&y, &p, &p, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(s.n_hard_fixed, 0);
        assert_eq!(s.hard_fixed_alpha_context, None);
        assert_eq!(s.n_easy, 2);
    }

    #[test]
    fn constant_alpha_gives_equal_group_means() {
        let y = [0, 1, 1, 0];
        let base = [0, 0, 1, 1];
        let gated = [0, 1, 1, 0];
        let s = gate_diagnostics(&y, &base, &gated, &[0.3; 4]).unwrap();
        assert_eq!(s.easy_alpha_context, Some(0.3));
        assert_eq!(s.hard_fixed_alpha_context, Some(0.3));
    }
}
