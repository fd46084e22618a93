//! Stage two: gated fusion head trained over frozen encoders.

pub mod features;
pub mod head;
pub mod losses;
pub mod train;

pub use features::{feature_len, raw_features, raw_features_unit, unit, FeatureStats, GateMask, STD_FLOOR};
pub use head::{
    argmax, gate_weights, DropoutMasks, GateDecision, HeadBatch, HeadInput, HeadKind, HeadParams, HeadShape, HeadVars,
};
pub use losses::{balance_loss, balance_loss_graph, customize_loss, customize_loss_graph, CustomTerms, DEFAULT_LAMBDA_BALANCE};
pub use train::{head_inputs, run_customize, stratified_subsample, train_head, CustomizeConfig, CustomizeReport, HeadEpoch};
