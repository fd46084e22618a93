//! Shift measurement, severity-driven regime selection and the synthetic dataset.

pub mod features;
pub mod mmd;
pub mod synth;
pub mod tiers;

pub use features::{extract, summary_features, z_normalize, FeatureMode};
pub use mmd::{gaussian_kernel, median_heuristic, mmd, mmd_with, MmdKind, MmdValue, SIGMA_FLOOR};
pub use synth::{generate_dataset, generate_dataset_with, ContextSpec, Dataset, SyntheticSpec};
pub use tiers::{
    assign_tiers, build_tiers, compute_cm, csv_field, select_regime, select_regime_with, RegimeThresholds, ShiftReport, Tier,
    TierConfig, TierEntry,
};
