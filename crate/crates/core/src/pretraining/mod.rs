//! Stage one: cross-modal reconstruction with latent regularization.

pub mod losses;
pub mod regime;
pub mod train;

pub use losses::{combine_recon, kl_loss, pretrain_loss, recon_loss, supcon_loss, PretrainBatch, PretrainTerms, ReconTerms};
pub use regime::{RegimeConfig, RegimeName};
pub use train::{evaluate_pretrain, run_pretrain, EpochRecord, LossComponents, PretrainConfig, PretrainReport, StopReason};
