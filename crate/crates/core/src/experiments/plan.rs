//! Experiment plans and the per-seed pipeline.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::diagnostics::{gate_diagnostics, GateSummary};
use super::metrics::{compute_metrics, Metrics};
use super::probe::{probe_context_embeddings, ProbeReport};
use super::table::{ResultRow, ResultTable, SeedFailure};
use crate::encoders::{ContextRecord, Dims, Encoders, SensorSegment};
use crate::error::{config, Result};
use crate::gating::{head_inputs, stratified_subsample, train_head, CustomizeConfig, GateDecision, GateMask, HeadInput, HeadKind};
use crate::numerics::{streams, RngState};
use crate::parallel::{map_slice, Exec};
use crate::pretraining::{run_pretrain, PretrainConfig, RegimeConfig, RegimeName, StopReason};
use crate::shiftlab::{build_tiers, generate_dataset_with, RegimeThresholds, ShiftReport, SyntheticSpec, Tier, TierConfig};

/// Methods compared in a plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Chorus,
    SensorOnly,
    FixAdd,
    FixConcat,
    AlignOnly,
    DynOnly,
    C1,
    C1c2,
}

/// Which pretrained encoders a method uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderSet {
    /// Reconstruction only, no latent regularization.
    Weak,
    /// The regime chosen for the plan (fixed or severity-selected).
    Selected,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Chorus,
        Method::SensorOnly,
        Method::FixAdd,
        Method::FixConcat,
        Method::AlignOnly,
        Method::DynOnly,
        Method::C1,
        Method::C1c2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Chorus => "chorus",
            Method::SensorOnly => "sensor_only",
            Method::FixAdd => "fix_add",
            Method::FixConcat => "fix_concat",
            Method::AlignOnly => "align_only",
            Method::DynOnly => "dyn_only",
            Method::C1 => "c1",
            Method::C1c2 => "c1c2",
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        match self {
            Method::Chorus | Method::AlignOnly | Method::DynOnly | Method::C1c2 => HeadKind::Gated,
            Method::SensorOnly => HeadKind::SensorOnly,
            Method::FixAdd => HeadKind::FixAdd,
            Method::FixConcat | Method::C1 => HeadKind::FixConcat,
        }
    }

    pub fn mask(&self) -> GateMask {
        match self {
            Method::AlignOnly => GateMask::AlignOnly,
            Method::DynOnly => GateMask::DynOnly,
            _ => GateMask::Full,
        }
    }

    pub fn encoders(&self) -> EncoderSet {
        match self {
            Method::SensorOnly | Method::C1 | Method::C1c2 => EncoderSet::Weak,
            _ => EncoderSet::Selected,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| config("experiment.methods", format!("unknown method {s:?}")))
    }
}

/// Fixed regime or selection from the severity index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeChoice {
    #[default]
    Auto,
    Weak,
    Medium,
    Strong,
}

impl RegimeChoice {
    pub fn fixed(&self) -> Option<RegimeName> {
        match self {
            RegimeChoice::Auto => None,
            RegimeChoice::Weak => Some(RegimeName::Weak),
            RegimeChoice::Medium => Some(RegimeName::Medium),
            RegimeChoice::Strong => Some(RegimeName::Strong),
        }
    }
}

impl std::str::FromStr for RegimeChoice {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Self::Auto),
            other => Ok(match other.parse::<RegimeName>()? {
                RegimeName::Weak => Self::Weak,
                RegimeName::Medium => Self::Medium,
                RegimeName::Strong => Self::Strong,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub dataset: SyntheticSpec,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// Labeled fraction of the source data available to stage two.
    pub budget: f64,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub regime: RegimeChoice,
    pub thresholds: RegimeThresholds,
    pub dims: Dims,
    pub pretrain: PretrainConfig,
    /// Fraction of source samples used (unlabeled) for pretraining.
    pub pretrain_fraction: f64,
    pub customize: CustomizeConfig,
    pub tiers: TierConfig,
    /// Regimes whose context embeddings are probed per seed.
    pub probe_regimes: Vec<RegimeName>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self::default_synthetic()
    }
}

impl ExperimentPlan {
    /// Six classes, two sources, three targets, all methods, five seeds.
    pub fn default_synthetic() -> Self {
        let dataset = SyntheticSpec::default_imu_like(0);
        let dims = Dims {
            channels: dataset.channels,
            length: dataset.length,
            text: dataset.text_dim,
            ..Dims::default()
        };
        Self {
            sources: vec!["Left pocket".into(), "Right pocket".into()],
            targets: vec!["Upper arm".into(), "Wrist".into(), "Belt".into()],
            dataset,
            budget: 0.01,
            methods: Method::ALL.to_vec(),
            seeds: (0..5).collect(),
            regime: RegimeChoice::Auto,
            thresholds: RegimeThresholds::default(),
            dims,
            pretrain: PretrainConfig::default(),
            pretrain_fraction: 0.8,
            customize: CustomizeConfig::default(),
            tiers: TierConfig::default(),
            probe_regimes: vec![RegimeName::Weak, RegimeName::Strong],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.dims.validate()?;
        self.pretrain.validate()?;
        self.customize.validate()?;
        self.thresholds.validate()?;
        if self.dims.channels != self.dataset.channels {
            return Err(config("dims.channels", "must equal dataset.channels"));
        }
        if self.dims.length != self.dataset.length {
            return Err(config("dims.length", "must equal dataset.length"));
        }
        if self.dims.text != self.dataset.text_dim {
            return Err(config("dims.text", "must equal dataset.text_dim"));
        }
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(config("experiment.budget", "must lie in (0, 1]"));
        }
        if !(self.pretrain_fraction > 0.0 && self.pretrain_fraction <= 1.0) {
            return Err(config("experiment.pretrain_fraction", "must lie in (0, 1]"));
        }
        if self.sources.is_empty() {
            return Err(config("experiment.sources", "at least one source context is required"));
        }
        if self.targets.len() < 3 {
            return Err(config("experiment.targets", "at least three target contexts are required"));
        }
        if self.seeds.is_empty() {
            return Err(config("experiment.seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(config("experiment.methods", "at least one method is required"));
        }
        for name in self.sources.iter().chain(&self.targets) {
            if self.dataset.context(name).is_none() {
                return Err(config("experiment.contexts", format!("unknown context {name:?}")));
            }
        }
        if let Some(t) = self.targets.iter().find(|t| self.sources.contains(t)) {
            return Err(config(
                "experiment.targets",
                format!("{t:?} is also a source context; targets must be disjoint from sources"),
            ));
        }
        Ok(())
    }
}

/// Source/target view of one generated dataset that counts target reads made
/// while a training phase is active.
pub struct SourceOnlyView<'a> {
    samples: &'a [SensorSegment],
    sources: &'a [String],
    training: Cell<bool>,
    target_reads_in_training: Cell<usize>,
}

impl<'a> SourceOnlyView<'a> {
    pub fn new(samples: &'a [SensorSegment], sources: &'a [String]) -> Self {
        Self {
            samples,
            sources,
            training: Cell::new(false),
            target_reads_in_training: Cell::new(0),
        }
    }

    pub fn source(&self) -> Vec<&'a SensorSegment> {
        self.samples.iter().filter(|s| self.sources.contains(&s.context_id)).collect()
    }

    pub fn target(&self, name: &str) -> Vec<&'a SensorSegment> {
        let out: Vec<&SensorSegment> = self.samples.iter().filter(|s| s.context_id == name).collect();
        if self.training.get() {
            self.target_reads_in_training.set(self.target_reads_in_training.get() + out.len());
        }
        out
    }

    pub fn begin_training(&self) {
        self.training.set(true);
    }

    pub fn end_training(&self) {
        self.training.set(false);
    }

    pub fn target_reads_in_training(&self) -> usize {
        self.target_reads_in_training.get()
    }
}

/// Summary of one pretraining run inside a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub regime: RegimeName,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedInfo {
    pub seed: u64,
    pub regime: RegimeName,
    pub cm: Option<f64>,
    pub shift: ShiftReport,
    pub labeled: usize,
    pub pretrain_pool: usize,
    pub pretrain: Vec<PretrainSummary>,
    pub target_reads_in_training: usize,
    pub probes: Vec<(RegimeName, ProbeReport)>,
    /// Gated-model context weights per tier, split by baseline correctness.
    pub diagnostics: Vec<(Tier, GateSummary)>,
}

/// Indices into the source samples: the unlabeled pretraining pool and the
/// labeled customization budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceSplit {
    pub pool: Vec<usize>,
    pub labeled: Vec<usize>,
}

/// Pool is a seeded `fraction` of the source samples; the labeled set is a
/// stratified `budget` drawn from all of them.
pub fn source_split(source: &[&SensorSegment], fraction: f64, budget: f64, seed: u64) -> Result<SourceSplit> {
    if source.is_empty() {
        return Err(config("experiment.sources", "no source samples"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config("experiment.pretrain_fraction", "must lie in (0, 1]"));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut RngState::new(seed, streams::SPLIT).derive(7).rng());
    let n_pool = ((source.len() as f64 * fraction).round() as usize).clamp(1, source.len());
    let mut pool = order[..n_pool].to_vec();
    pool.sort_unstable();
    let labels: Vec<usize> = source.iter().map(|s| s.label.unwrap_or(0)).collect();
    let labeled = stratified_subsample(&labels, budget, RngState::new(seed, streams::SUBSAMPLE))?;
    Ok(SourceSplit { pool, labeled })
}

struct Trained {
    enc: Encoders<f32>,
    summary: PretrainSummary,
}

/// Runs every seed of the plan; failing seeds are recorded and skipped.
pub fn run_plan(plan: &ExperimentPlan) -> Result<ResultTable> {
    run_plan_with(plan, Exec::available())
}

pub fn run_plan_with(plan: &ExperimentPlan, exec: Exec) -> Result<ResultTable> {
    plan.validate()?;
    let outcomes = map_slice(exec, &plan.seeds, |&seed| (seed, run_seed(plan, seed, exec)));
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for (seed, out) in outcomes {
        match out {
            Ok((r, info)) => {
                rows.extend(r);
                seeds.push(info);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push(SeedFailure {
                    seed,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(ResultTable::new(rows, seeds, failures))
}

fn pretrain_regime(
    plan: &ExperimentPlan,
    pool: &[&SensorSegment],
    contexts: &[ContextRecord],
    regime: RegimeName,
    seed: u64,
) -> Result<Trained> {
    let (enc, report) = run_pretrain(pool, contexts, plan.dims, &RegimeConfig::named(regime), &plan.pretrain, seed)?;
    log::info!(
        "seed {seed}: {regime} pretraining best epoch {} of {}",
        report.best_epoch,
        report.epochs.len()
    );
    Ok(Trained {
        enc,
        summary: PretrainSummary {
            regime,
            epochs_run: report.epochs.len(),
            best_epoch: report.best_epoch,
            best_val_total: report.best_val_total,
            stop_reason: report.stop_reason,
        },
    })
}

/// Head inputs for the labeled split and for every target context.
type InputSets = (Vec<HeadInput>, BTreeMap<String, Vec<HeadInput>>);

/// Per-context decisions of one trained head.
type Decisions = BTreeMap<String, Vec<GateDecision>>;

fn run_seed(plan: &ExperimentPlan, seed: u64, exec: Exec) -> Result<(Vec<ResultRow>, SeedInfo)> {
    let mut spec = plan.dataset.clone();
    spec.seed = seed;
    let ds = generate_dataset_with(&spec, exec)?;
    let view = SourceOnlyView::new(&ds.samples, &plan.sources);
    let k = spec.num_classes;

    let source_ctx: Vec<ContextRecord> = ds
        .contexts
        .iter()
        .filter(|c| plan.sources.contains(&c.context_id))
        .cloned()
        .collect();

    // training phase: pretraining pool, labeled budget, weak encoders
    view.begin_training();
    let source = view.source();
    let split = source_split(&source, plan.pretrain_fraction, plan.budget, seed)?;
    let pool: Vec<&SensorSegment> = split.pool.iter().map(|&i| source[i]).collect();
    let labeled: Vec<&SensorSegment> = split.labeled.iter().map(|&i| source[i]).collect();
    let labels: Vec<usize> = labeled.iter().map(|s| s.label.unwrap_or(0)).collect();

    let mut trained: BTreeMap<RegimeName, Trained> = BTreeMap::new();
    trained.insert(RegimeName::Weak, pretrain_regime(plan, &pool, &source_ctx, RegimeName::Weak, seed)?);
    view.end_training();

    // shift tiers from model-free features
    let mut tier_cfg = plan.tiers;
    tier_cfg.seed = seed;
    let mut shift = build_tiers(&ds, &plan.sources, &plan.targets, &tier_cfg, exec)?;
    let low = shift.context_in(Tier::Low).expect("three tiers").to_string();
    let high = shift.context_in(Tier::High).expect("three tiers").to_string();

    let targets: BTreeMap<String, Vec<&SensorSegment>> =
        plan.targets.iter().map(|t| (t.clone(), view.target(t))).collect();
    let target_labels: BTreeMap<&str, Vec<usize>> = targets
        .iter()
        .map(|(t, s)| (t.as_str(), s.iter().map(|x| x.label.unwrap_or(0)).collect()))
        .collect();

    let inputs_for = |enc: &Encoders<f32>| -> Result<InputSets> {
        let lab = head_inputs(enc, &labeled, &source_ctx, exec)?;
        let mut tgt = BTreeMap::new();
        for (t, segs) in &targets {
            tgt.insert(t.clone(), head_inputs(enc, segs, &ds.contexts, exec)?);
        }
        Ok((lab, tgt))
    };
    let train_and_eval = |method: Method,
                          lab: &[HeadInput],
                          tgt: &BTreeMap<String, Vec<HeadInput>>,
                          enc: &Encoders<f32>|
     -> Result<Decisions> {
        let lab_refs: Vec<&HeadInput> = lab.iter().collect();
        view.begin_training();
        let (head, report) = train_head(
            &lab_refs,
            &labels,
            enc.dims.latent,
            enc.dims.channels,
            method.head_kind(),
            method.mask(),
            k,
            &plan.customize,
            seed,
        )?;
        view.end_training();
        log::debug!("seed {seed}: {method} head best epoch {}", report.best_epoch);
        let mut out = Decisions::new();
        for (t, inp) in tgt {
            let refs: Vec<&HeadInput> = inp.iter().collect();
            out.insert(t.clone(), head.decide_batch(&refs, exec)?);
        }
        Ok(out)
    };
    let accuracy = |d: &[GateDecision], y: &[usize]| -> Result<Metrics> {
        let preds: Vec<usize> = d.iter().map(|x| x.y_hat).collect();
        compute_metrics(y, &preds, k)
    };

    let mut decisions: BTreeMap<Method, Decisions> = BTreeMap::new();
    let (weak_lab, weak_tgt) = inputs_for(&trained[&RegimeName::Weak].enc)?;

    // severity index from the sensor-only baseline
    let so = train_and_eval(Method::SensorOnly, &weak_lab, &weak_tgt, &trained[&RegimeName::Weak].enc)?;
    let perf_low = accuracy(&so[&low], &target_labels[low.as_str()])?.accuracy;
    let perf_high = accuracy(&so[&high], &target_labels[high.as_str()])?.accuracy;
    let cm = match shift.attach_severity(perf_low, perf_high, &plan.thresholds) {
        Ok(()) => shift.cm,
        Err(e) => {
            log::warn!("seed {seed}: severity index unavailable ({e}); falling back to weak regime");
            None
        }
    };
    let regime = plan
        .regime
        .fixed()
        .or(shift.regime)
        .unwrap_or(RegimeName::Weak);
    if plan.methods.contains(&Method::SensorOnly) {
        decisions.insert(Method::SensorOnly, so);
    }

    let ensure = |r: RegimeName, trained: &mut BTreeMap<RegimeName, Trained>| -> Result<()> {
        if let std::collections::btree_map::Entry::Vacant(slot) = trained.entry(r) {
            view.begin_training();
            let t = pretrain_regime(plan, &pool, &source_ctx, r, seed)?;
            view.end_training();
            slot.insert(t);
        }
        Ok(())
    };
    ensure(regime, &mut trained)?;
    let selected_inputs = if regime == RegimeName::Weak {
        None
    } else {
        Some(inputs_for(&trained[&regime].enc)?)
    };
    for &method in &plan.methods {
        if decisions.contains_key(&method) {
            continue;
        }
        let (enc, lab, tgt) = match (method.encoders(), &selected_inputs) {
            (EncoderSet::Selected, Some((l, t))) => (&trained[&regime].enc, l, t),
            _ => (&trained[&RegimeName::Weak].enc, &weak_lab, &weak_tgt),
        };
        let d = train_and_eval(method, lab, tgt, enc)?;
        decisions.insert(method, d);
    }

    let mut probes = Vec::new();
    for &r in &plan.probe_regimes {
        ensure(r, &mut trained)?;
        let ids: Vec<&str> = ds.samples.iter().map(|s| s.context_id.as_str()).collect();
        probes.push((r, probe_context_embeddings(&trained[&r].enc, &ds.contexts, &ids, seed)?));
    }

    let mut rows = Vec::new();
    for (method, per_ctx) in &decisions {
        let enc_regime = match method.encoders() {
            EncoderSet::Weak => RegimeName::Weak,
            EncoderSet::Selected => regime,
        };
        for (t, d) in per_ctx {
            let m = accuracy(d, &target_labels[t.as_str()])?;
            rows.push(ResultRow {
                method: *method,
                tier: shift.tier_of(t).expect("target has a tier"),
                context: t.clone(),
                seed,
                regime: enc_regime,
                accuracy: m.accuracy,
                f1: m.f1,
                precision: m.precision,
                recall: m.recall,
            });
        }
    }

    let mut diagnostics = Vec::new();
    if let (Some(gated), Some(base)) = (decisions.get(&Method::Chorus), decisions.get(&Method::SensorOnly)) {
        for e in &shift.entries {
            let y = &target_labels[e.context.as_str()];
            let g: Vec<usize> = gated[&e.context].iter().map(|d| d.y_hat).collect();
            let b: Vec<usize> = base[&e.context].iter().map(|d| d.y_hat).collect();
            let a: Vec<f64> = gated[&e.context].iter().map(|d| d.alpha[1]).collect();
            diagnostics.push((e.tier, gate_diagnostics(y, &b, &g, &a)?));
        }
    }

    let info = SeedInfo {
        seed,
        regime,
        cm,
        shift,
        labeled: labeled.len(),
        pretrain_pool: pool.len(),
        pretrain: trained.values().map(|t| t.summary.clone()).collect(),
        target_reads_in_training: view.target_reads_in_training(),
        probes,
        diagnostics,
    };
    Ok((rows, info))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_is_valid() {
        ExperimentPlan::default_synthetic().validate().unwrap();
    }

    #[test]
    fn overlapping_targets_are_rejected() {
        let mut p = ExperimentPlan::default_synthetic();
        p.targets[0] = "Left pocket".into();
        match p.validate() {
            Err(crate::Error::Config { key, .. }) => assert_eq!(key, "experiment.targets"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!(Method::SensorOnly.head_kind(), HeadKind::SensorOnly);
        assert_eq!(Method::C1.head_kind(), HeadKind::FixConcat);
        assert_eq!(Method::C1.encoders(), EncoderSet::Weak);
        assert_eq!(Method::Chorus.encoders(), EncoderSet::Selected);
    }
}
