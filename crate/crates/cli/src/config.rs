//! Single declarative run configuration (TOML). Every field has a default, so an
//! empty file is the default synthetic setup; unknown keys are rejected.

use std::path::{Path, PathBuf};

use chorus_core::encoders::Dims;
use chorus_core::experiments::{ExperimentPlan, Method, RegimeChoice};
use chorus_core::gating::{CustomizeConfig, GateMask, HeadKind};
use chorus_core::pretraining::{PretrainConfig, RegimeName};
use chorus_core::shiftlab::{FeatureMode, MmdKind, RegimeThresholds, SyntheticSpec, TierConfig};
use chorus_core::streaming::{StreamConfig, TraceSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for single-run commands.
    pub seed: u64,
    /// `auto` picks the regime from the severity index of a shift report.
    pub regime: RegimeChoice,
    pub dataset: SyntheticSpec,
    pub dims: Dims,
    pub experiment: ExperimentSection,
    pub shift: ShiftSection,
    pub pretrain: PretrainConfig,
    pub customize: CustomizeConfig,
    pub head: HeadSection,
    pub stream: StreamConfig,
    pub trace: TraceSpec,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// Labeled source fraction for customization, in `(0, 1]`.
    pub budget: f64,
    /// Unlabeled source fraction used for pretraining.
    pub pretrain_fraction: f64,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub probe_regimes: Vec<RegimeName>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let p = ExperimentPlan::default_synthetic();
        Self {
            sources: p.sources,
            targets: p.targets,
            budget: p.budget,
            pretrain_fraction: p.pretrain_fraction,
            methods: p.methods,
            seeds: p.seeds,
            probe_regimes: p.probe_regimes,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSection {
    pub features: FeatureMode,
    pub estimator: MmdKind,
    pub max_per_context: Option<usize>,
    pub thresholds: RegimeThresholds,
    /// Sensor-only accuracy on the Low and High tiers; both enable `C_m`.
    pub perf_low: Option<f64>,
    pub perf_high: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub kind: HeadKind,
    pub mask: GateMask,
}

/// File locations; relative paths resolve against `--out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub shift: PathBuf,
    pub encoders: PathBuf,
    pub model: PathBuf,
    /// Read instead of generated when it exists.
    pub trace: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset.jsonl".into(),
            shift: "shift.json".into(),
            encoders: "encoders.chor".into(),
            model: "model.chor".into(),
            trace: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = ExperimentPlan::default_synthetic();
        Self {
            seed: 0,
            regime: RegimeChoice::Auto,
            dataset: p.dataset,
            dims: p.dims,
            experiment: ExperimentSection::default(),
            shift: ShiftSection::default(),
            pretrain: p.pretrain,
            customize: p.customize,
            head: HeadSection::default(),
            stream: StreamConfig::default(),
            trace: TraceSpec::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; errors name the offending key.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError::config(key, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn tier_config(&self) -> TierConfig {
        let d = TierConfig::default();
        TierConfig {
            features: self.shift.features,
            estimator: self.shift.estimator,
            max_per_context: self.shift.max_per_context.unwrap_or(d.max_per_context),
            seed: self.seed,
        }
    }

    pub fn plan(&self) -> ExperimentPlan {
        let e = &self.experiment;
        ExperimentPlan {
            dataset: self.dataset.clone(),
            sources: e.sources.clone(),
            targets: e.targets.clone(),
            budget: e.budget,
            methods: e.methods.clone(),
            seeds: e.seeds.clone(),
            regime: self.regime,
            thresholds: self.shift.thresholds,
            dims: self.dims,
            pretrain: self.pretrain.clone(),
            pretrain_fraction: e.pretrain_fraction,
            customize: self.customize.clone(),
            tiers: self.tier_config(),
            probe_regimes: e.probe_regimes.clone(),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.plan().validate()?;
        if self.stream.capacity == 0 {
            return Err(CliError::config("stream.capacity", "must be positive"));
        }
        self.trace.validate()?;
        for (key, v) in [("shift.perf_low", self.shift.perf_low), ("shift.perf_high", self.shift.perf_high)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(CliError::config(key, "must lie in [0, 1]"));
                }
            }
        }
        if self.shift.perf_low.is_some() != self.shift.perf_high.is_some() {
            return Err(CliError::config("shift.perf_high", "perf_low and perf_high must be given together"));
        }
        Ok(())
    }

    /// Applies `--seed`: every seed in the configuration follows it, and the
    /// experiment runs that single seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        self.trace.seed = seed;
        self.experiment.seeds = vec![seed];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("[pretrain]\nbatch = 3\n").unwrap_err();
        assert!(matches!(&e, CliError::Core(chorus_core::Error::Config { key, .. }) if key == "pretrain.batch"), "{e}");
        let e = RunConfig::from_toml("colour = 1\n").unwrap_err();
        assert!(matches!(&e, CliError::Core(chorus_core::Error::Config { key, .. }) if key == "colour"), "{e}");
    }

    #[test]
    fn invalid_values_are_named() {
        let cases = [
            ("[experiment]\nbudget = 0.0\n", "experiment.budget"),
            ("[stream]\ncapacity = 0\n", "stream.capacity"),
            ("[pretrain]\nbatch_size = 0\n", "pretrain.batch_size"),
            ("[customize.optimizer]\nlr = -1.0\n", "customize.optimizer.lr"),
            ("regime = \"extreme\"\n", "regime"),
            ("[experiment]\ntargets = [\"Left pocket\", \"Wrist\", \"Belt\"]\n", "experiment.targets"),
        ];
        for (text, want) in cases {
            match RunConfig::from_toml(text) {
                Err(CliError::Core(chorus_core::Error::Config { key, .. })) => assert_eq!(key, want, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut c = RunConfig::default();
        c.override_seed(9);
        assert_eq!((c.seed, c.dataset.seed, c.trace.seed), (9, 9, 9));
        assert_eq!(c.experiment.seeds, vec![9]);
    }
}
