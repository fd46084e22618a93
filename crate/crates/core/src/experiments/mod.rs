//! Experiment orchestration on synthetic data: baselines, ablations, probes.

pub mod diagnostics;
pub mod metrics;
pub mod plan;
pub mod probe;
pub mod table;

pub use diagnostics::{gate_diagnostics, GateSummary};
pub use metrics::{compute_metrics, confusion, mean_std, Metrics};
pub use plan::{run_plan, run_plan_with, source_split, SourceSplit, EncoderSet, ExperimentPlan, Method, PretrainSummary, RegimeChoice, SeedInfo, SourceOnlyView};
pub use probe::{linear_probe, probe_context_embeddings, silhouette, ProbeReport};
pub use table::{ResultRow, ResultTable, SeedFailure, SummaryRow};
