//! Context-aware model customization without target-domain data.
//!
//! Stage one aligns a sensor encoder and a context encoder through cross-modal
//! reconstruction with latent regularization; stage two trains a gated head over
//! the frozen encoders on a small labeled source budget. Streaming inference reuses
//! cached context representations. The [`shiftlab`] module provides MMD-based shift
//! tiers and a synthetic dataset whose context shift is controllable.

// NaN must fail validation, hence `!(x > 0.0)`; index loops read better in the kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod numerics;
pub mod parallel;

pub use error::{Error, Result};
pub mod encoders;
pub mod pretraining;
pub mod shiftlab;
pub mod gating;
pub mod streaming;
pub mod experiments;
