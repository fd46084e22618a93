//! Aggregated experiment results and their CSV/JSON forms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::mean_std;
use super::plan::{Method, SeedInfo};
use crate::pretraining::RegimeName;
use crate::shiftlab::tiers::csv_field;
use crate::shiftlab::Tier;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub tier: Tier,
    pub context: String,
    pub seed: u64,
    /// Regime of the encoders the method ran on.
    pub regime: RegimeName,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub tier: Tier,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub seeds: Vec<SeedInfo>,
    pub failures: Vec<SeedFailure>,
}

impl ResultTable {
    pub fn new(rows: Vec<ResultRow>, seeds: Vec<SeedInfo>, failures: Vec<SeedFailure>) -> Self {
        let mut groups: BTreeMap<(Method, Tier), Vec<&ResultRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry((r.method, r.tier)).or_default().push(r);
        }
        let summary = groups
            .into_iter()
            .map(|((method, tier), rs)| {
                let col = |f: fn(&ResultRow) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (accuracy_mean, accuracy_std) = col(|r| r.accuracy);
                let (f1_mean, f1_std) = col(|r| r.f1);
                let (precision_mean, precision_std) = col(|r| r.precision);
                let (recall_mean, recall_std) = col(|r| r.recall);
                SummaryRow {
                    method,
                    tier,
                    seeds: rs.len(),
                    accuracy_mean,
                    accuracy_std,
                    f1_mean,
                    f1_std,
                    precision_mean,
                    precision_std,
                    recall_mean,
                    recall_std,
                }
            })
            .collect();
        Self {
            rows,
            summary,
            seeds,
            failures,
        }
    }

    /// Per-seed accuracies of `method` on `tier`, in seed order.
    pub fn accuracies(&self, method: Method, tier: Tier) -> Vec<(u64, f64)> {
        let mut v: Vec<(u64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.tier == tier)
            .map(|r| (r.seed, r.accuracy))
            .collect();
        v.sort_by_key(|p| p.0);
        v
    }

    pub fn mean_accuracy(&self, method: Method, tier: Tier) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.tier == tier)
            .map(|s| s.accuracy_mean)
    }

    /// One row per (method, tier, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,tier,context,seed,regime,accuracy,f1,precision,recall\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.method,
                r.tier,
                csv_field(&r.context),
                r.seed,
                r.regime,
                r.accuracy,
                r.f1,
                r.precision,
                r.recall
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,tier,seeds,accuracy_mean,accuracy_std,f1_mean,f1_std,precision_mean,precision_std,recall_mean,recall_std\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                s.method,
                s.tier,
                s.seeds,
                s.accuracy_mean,
                s.accuracy_std,
                s.f1_mean,
                s.f1_std,
                s.precision_mean,
                s.precision_std,
                s.recall_mean,
                s.recall_std
            ));
        }
        out
    }

    /// Gate diagnostics per seed and tier; empty groups are left blank.
    pub fn diagnostics_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "seed,tier,n,mean_alpha_context,min_alpha_context,max_alpha_context,n_easy,easy_alpha_context,n_hard_fixed,hard_fixed_alpha_context\n",
        );
        for s in &self.seeds {
            for (tier, d) in &s.diagnostics {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    s.seed,
                    tier,
                    d.n,
                    d.mean_alpha_context,
                    d.min_alpha_context,
                    d.max_alpha_context,
                    d.n_easy,
                    opt(d.easy_alpha_context),
                    d.n_hard_fixed,
                    opt(d.hard_fixed_alpha_context)
                ));
            }
        }
        out
    }
}
