//! Tier construction, the severity index and regime selection.

use serde::{Deserialize, Serialize};

use super::features::{extract, z_normalize, FeatureMode};
use super::mmd::{median_heuristic, mmd_with, MmdKind};
use super::synth::Dataset;
use crate::error::{config, contract, Result};
use crate::numerics::{streams, RngState};
use crate::parallel::Exec;
use crate::pretraining::{RegimeConfig, RegimeName};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Low,
    Mid,
    High,
}

impl Tier {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Low => "Low",
            Tier::Mid => "Mid",
            Tier::High => "High",
        }
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierEntry {
    pub context: String,
    pub mmd: f64,
    pub mmd2: f64,
    pub tier: Tier,
}

/// Severity thresholds mapping `C_m` to a regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeThresholds {
    /// `C_m` below this selects the weak regime.
    pub medium_from: f64,
    /// `C_m` at or above this selects the strong regime.
    pub strong_from: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            medium_from: 0.25,
            strong_from: 0.45,
        }
    }
}

impl RegimeThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.medium_from.is_finite() && self.strong_from.is_finite()) || self.medium_from > self.strong_from {
            return Err(config(
                "shift.thresholds",
                "thresholds must be finite with medium_from <= strong_from",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub sources: Vec<String>,
    /// Sorted from lowest to highest MMD.
    pub entries: Vec<TierEntry>,
    pub sigma: f64,
    pub estimator: MmdKind,
    pub features: FeatureMode,
    /// Groups of contexts whose MMD values tied and were ordered by name.
    pub ties: Vec<Vec<String>>,
    pub perf_low: Option<f64>,
    pub perf_high: Option<f64>,
    pub cm: Option<f64>,
    pub regime: Option<RegimeName>,
}

impl ShiftReport {
    pub fn tier_of(&self, context: &str) -> Option<Tier> {
        self.entries.iter().find(|e| e.context == context).map(|e| e.tier)
    }

    /// The first context (by rank) in `tier`.
    pub fn context_in(&self, tier: Tier) -> Option<&str> {
        self.entries.iter().find(|e| e.tier == tier).map(|e| e.context.as_str())
    }

    /// Fills in the severity fields from sensor-only performances.
    pub fn attach_severity(&mut self, perf_low: f64, perf_high: f64, thresholds: &RegimeThresholds) -> Result<()> {
        let cm = compute_cm(perf_low, perf_high)?;
        self.perf_low = Some(perf_low);
        self.perf_high = Some(perf_high);
        self.cm = Some(cm);
        self.regime = Some(select_regime_with(cm, thresholds)?.name);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("context,mmd,tier\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", csv_field(&e.context), e.mmd, e.tier));
        }
        out
    }
}

/// Quotes a CSV field when it contains a separator, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TierConfig {
    pub features: FeatureMode,
    pub estimator: MmdKind,
    /// Per-context cap on samples entering the MMD; `0` keeps everything.
    pub max_per_context: usize,
    pub seed: u64,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            features: FeatureMode::Summary,
            estimator: MmdKind::Biased,
            max_per_context: 500,
            seed: 0,
        }
    }
}

/// Assigns tiers to already-computed `(context, mmd)` values.
///
/// Sorting is by MMD with the context name breaking ties; any tie is reported.
pub fn assign_tiers(values: &[(String, f64, f64)]) -> Result<(Vec<TierEntry>, Vec<Vec<String>>)> {
    if values.len() < 3 {
        return Err(contract(format!("a three-tier split needs at least 3 targets, got {}", values.len())));
    }
    let mut sorted: Vec<&(String, f64, f64)> = values.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let n = sorted.len();
    let entries = sorted
        .iter()
        .enumerate()
        .map(|(rank, (name, mmd, mmd2))| {
            let tier = match (3 * rank) / n {
                0 => Tier::Low,
                1 => Tier::Mid,
                _ => Tier::High,
            };
            TierEntry {
                context: name.clone(),
                mmd: *mmd,
                mmd2: *mmd2,
                tier,
            }
        })
        .collect::<Vec<_>>();
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j].1 == sorted[i].1 {
            j += 1;
        }
        if j - i > 1 {
            ties.push(sorted[i..j].iter().map(|v| v.0.clone()).collect());
        }
        i = j;
    }
    Ok((entries, ties))
}

/// MMD from the pooled source contexts to each target, ranked into tiers.
pub fn build_tiers(
    dataset: &Dataset,
    sources: &[String],
    targets: &[String],
    cfg: &TierConfig,
    exec: Exec,
) -> Result<ShiftReport> {
    if sources.is_empty() {
        return Err(contract("at least one source context is required"));
    }
    let root = RngState::new(cfg.seed, streams::SUBSAMPLE);
    let pick = |name: &str, tag: u64| -> Result<Vec<&crate::encoders::SensorSegment>> {
        let all: Vec<&crate::encoders::SensorSegment> =
            dataset.samples.iter().filter(|s| s.context_id == name).collect();
        if all.is_empty() {
            return Err(contract(format!("context {name:?} has no samples")));
        }
        if cfg.max_per_context == 0 || all.len() <= cfg.max_per_context {
            return Ok(all);
        }
        let mut idx = rand::seq::index::sample(&mut root.derive(tag).rng(), all.len(), cfg.max_per_context).into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| all[i]).collect())
    };
    let mut groups = Vec::new();
    for (i, s) in sources.iter().enumerate() {
        groups.push(pick(s, i as u64)?);
    }
    let n_src = groups.len();
    for (i, t) in targets.iter().enumerate() {
        groups.push(pick(t, (n_src + i) as u64)?);
    }
    // features are normalized with statistics pooled over every compared sample
    let flat: Vec<&crate::encoders::SensorSegment> = groups.iter().flatten().copied().collect();
    let mut feats = extract(&flat, cfg.features, exec);
    z_normalize(&mut feats);
    let mut offsets = vec![0];
    for g in &groups {
        offsets.push(offsets.last().unwrap() + g.len());
    }
    let all_refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
    let sigma = median_heuristic(&all_refs, root.derive(u64::MAX))?;
    let source_refs = &all_refs[..offsets[n_src]];
    let mut values = Vec::with_capacity(targets.len());
    for (i, t) in targets.iter().enumerate() {
        let g = n_src + i;
        let target_refs = &all_refs[offsets[g]..offsets[g + 1]];
        let v = mmd_with(exec, source_refs, target_refs, sigma, cfg.estimator)?;
        values.push((t.clone(), v.mmd, v.mmd2));
    }
    let (entries, ties) = assign_tiers(&values)?;
    if !ties.is_empty() {
        log::warn!("MMD ties broken by context name: {ties:?}");
    }
    Ok(ShiftReport {
        sources: sources.to_vec(),
        entries,
        sigma,
        estimator: cfg.estimator,
        features: cfg.features,
        ties,
        perf_low: None,
        perf_high: None,
        cm: None,
        regime: None,
    })
}

/// `1 - perf_high / perf_low`.
pub fn compute_cm(perf_low: f64, perf_high: f64) -> Result<f64> {
    if !(perf_low > 0.0) {
        return Err(contract(format!("perf_low must be positive, got {perf_low}")));
    }
    Ok(1.0 - perf_high / perf_low)
}

pub fn select_regime(cm: f64) -> Result<RegimeConfig> {
    select_regime_with(cm, &RegimeThresholds::default())
}

pub fn select_regime_with(cm: f64, t: &RegimeThresholds) -> Result<RegimeConfig> {
    t.validate()?;
    if !cm.is_finite() {
        return Err(contract(format!("severity index must be finite, got {cm}")));
    }
    let name = if cm < t.medium_from {
        RegimeName::Weak
    } else if cm < t.strong_from {
        RegimeName::Medium
    } else {
        RegimeName::Strong
    };
    Ok(RegimeConfig::named(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_assigns_tiers() {
        let v = vec![
            ("c".to_string(), 0.9, 0.81),
            ("a".to_string(), 0.1, 0.01),
            ("b".to_string(), 0.2, 0.04),
        ];
        let (e, ties) = assign_tiers(&v).unwrap();
        let got: Vec<(&str, Tier)> = e.iter().map(|e| (e.context.as_str(), e.tier)).collect();
        assert_eq!(got, vec![("a", Tier::Low), ("b", Tier::Mid), ("c", Tier::High)]);
        assert!(ties.is_empty());
    }

    #[test]
    fn ties_break_by_name_and_are_reported() {
        let v = vec![
            ("zeta".to_string(), 0.5, 0.25),
            ("alpha".to_string(), 0.5, 0.25),
            ("mid".to_string(), 0.1, 0.01),
        ];
        let (e, ties) = assign_tiers(&v).unwrap();
        assert_eq!(e[1].context, "alpha");
        assert_eq!(e[2].context, "zeta");
        assert_eq!(ties, vec![vec!["alpha".to_string(), "zeta".to_string()]]);
    }

    #[test]
    fn tertiles_for_more_targets() {
        let v: Vec<_> = (0..6).map(|i| (format!("t{i}"), i as f64, 0.0)).collect();
        let (e, _) = assign_tiers(&v).unwrap();
        let tiers: Vec<Tier> = e.iter().map(|e| e.tier).collect();
        assert_eq!(tiers, vec![Tier::Low, Tier::Low, Tier::Mid, Tier::Mid, Tier::High, Tier::High]);
    }

    #[test]
    fn too_few_targets() {
        assert!(assign_tiers(&[("a".into(), 0.0, 0.0)]).is_err());
    }

    #[test]
    fn cm_examples() {
        assert_eq!(compute_cm(0.7, 0.7).unwrap(), 0.0);
        assert!((compute_cm(0.8, 0.5).unwrap() - 0.375).abs() < 1e-12);
        assert!(compute_cm(0.5, 0.8).unwrap() < 0.0);
        assert!(matches!(compute_cm(0.0, 0.5), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn regime_mapping() {
        assert_eq!(select_regime(0.19).unwrap().name, RegimeName::Weak);
        assert_eq!(select_regime(0.37).unwrap().name, RegimeName::Medium);
        assert_eq!(select_regime(0.48).unwrap().name, RegimeName::Strong);
        assert_eq!(select_regime(0.25).unwrap().name, RegimeName::Medium);
        assert_eq!(select_regime(0.45).unwrap().name, RegimeName::Strong);
        assert_eq!(select_regime(-0.3).unwrap().name, RegimeName::Weak);
    }

    #[test]
    fn csv_has_expected_columns() {
        let (entries, ties) = assign_tiers(&[
            ("a".into(), 0.1, 0.01),
            ("b, c".into(), 0.2, 0.04),
            ("d".into(), 0.3, 0.09),
        ])
        .unwrap();
        let r = ShiftReport {
            sources: vec!["s".into()],
            entries,
            sigma: 1.0,
            estimator: MmdKind::Biased,
            features: FeatureMode::Summary,
            ties,
            perf_low: None,
            perf_high: None,
            cm: None,
            regime: None,
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("context,mmd,tier\n"));
        assert!(csv.contains("\"b, c\",0.2,Mid"));
    }
}
