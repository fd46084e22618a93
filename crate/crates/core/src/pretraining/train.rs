use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::{pretrain_loss, PretrainBatch};
use super::regime::RegimeConfig;
use crate::encoders::{ContextRecord, Dims, Encoders, SensorSegment};
use crate::error::{config, contract, Result};
use crate::numerics::{streams, AdamW, Graph, RngState, Tensor};

/// Optimization settings for stage one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub tau: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamW::default(),
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            val_fraction: 0.1,
            tau: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer
            .validate()
            .map_err(|e| prefix_key(e, "pretrain.optimizer"))?;
        if self.batch_size == 0 {
            return Err(config("pretrain.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config("pretrain.val_fraction", "must lie in [0, 1)"));
        }
        if !(self.tau > 0.0) {
            return Err(config("pretrain.tau", "must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn prefix_key(e: crate::Error, prefix: &str) -> crate::Error {
    match e {
        crate::Error::Config { key, message } => crate::Error::Config {
            key: format!("{prefix}.{key}"),
            message,
        },
        other => other,
    }
}

/// Averaged loss components over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub xc: f64,
    pub cx: f64,
    pub recon: f64,
    pub kl: f64,
    pub con: f64,
    pub total: f64,
}

impl LossComponents {
    fn add_weighted(&mut self, other: &LossComponents, w: f64) {
        self.xc += other.xc * w;
        self.cx += other.cx * w;
        self.recon += other.recon * w;
        self.kl += other.kl * w;
        self.con += other.con * w;
        self.total += other.total * w;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.xc *= s;
        self.cx *= s;
        self.recon *= s;
        self.kl *= s;
        self.con *= s;
        self.total *= s;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossComponents,
    pub val: LossComponents,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
    ZeroBudget,
}

/// Per-epoch history of a stage-one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub regime: RegimeConfig,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Validation losses of the untrained model (epoch 0).
    pub initial_val: LossComponents,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch improved on the initialization.
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub stop_reason: StopReason,
    pub degenerate_contrastive_batches: usize,
    pub warnings: Vec<String>,
}

struct Prepared<'a> {
    samples: Vec<&'a SensorSegment>,
    features: Vec<&'a [f32]>,
    labels: Vec<usize>,
}

fn prepare<'a>(
    samples: &[&'a SensorSegment],
    contexts: &'a [ContextRecord],
) -> Result<(Prepared<'a>, usize)> {
    let mut index: HashMap<&str, (usize, &ContextRecord)> = HashMap::new();
    for c in contexts {
        let next = index.len();
        index.entry(c.context_id.as_str()).or_insert((next, c));
    }
    let mut features = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut seen = std::collections::BTreeSet::new();
    for s in samples {
        let (label, rec) = index
            .get(s.context_id.as_str())
            .ok_or_else(|| contract(format!("no context record for `{}`", s.context_id)))?;
        features.push(rec.features.as_slice());
        labels.push(*label);
        seen.insert(*label);
    }
    Ok((
        Prepared {
            samples: samples.to_vec(),
            features,
            labels,
        },
        seen.len(),
    ))
}

fn make_batch(
    enc: &Encoders<f32>,
    data: &Prepared<'_>,
    idx: &[usize],
    eps: Option<RngState>,
) -> Result<PretrainBatch<f32>> {
    let segs: Vec<&SensorSegment> = idx.iter().map(|&i| data.samples[i]).collect();
    let feats: Vec<&[f32]> = idx.iter().map(|&i| data.features[i]).collect();
    let eps = eps.map(|state| {
        let mut r = state.rng();
        let n = idx.len() * enc.dims.latent;
        let v: Vec<f32> = (0..n).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
        Tensor::from_vec(&[idx.len(), enc.dims.latent], v)
    });
    Ok(PretrainBatch {
        x_input: enc.segments_input(&segs)?,
        x_target: enc.segments_target(&segs)?,
        c_features: enc.features_input(&feats)?,
        context_labels: idx.iter().map(|&i| data.labels[i]).collect(),
        eps,
    })
}

fn components(g: &Graph<f32>, t: &super::losses::PretrainTerms) -> LossComponents {
    LossComponents {
        xc: g.scalar(t.xc) as f64,
        cx: g.scalar(t.cx) as f64,
        recon: g.scalar(t.recon) as f64,
        kl: g.scalar(t.kl) as f64,
        con: g.scalar(t.con) as f64,
        total: g.scalar(t.total) as f64,
    }
}

/// Deterministic (`z_c = mu_c`) loss components averaged over `idx`.
fn evaluate(
    enc: &Encoders<f32>,
    data: &Prepared<'_>,
    idx: &[usize],
    regime: &RegimeConfig,
    tau: f64,
) -> Result<LossComponents> {
    let mut acc = LossComponents::default();
    if idx.is_empty() {
        return Ok(acc);
    }
    for chunk in idx.chunks(128) {
        let batch = make_batch(enc, data, chunk, None)?;
        let mut g = Graph::new();
        let t = pretrain_loss(&mut g, enc, &enc.store, &batch, regime, tau)?;
        acc.add_weighted(&components(&g, &t), chunk.len() as f64);
    }
    Ok(acc.scaled(1.0 / idx.len() as f64))
}

/// Evaluates the stage-one objective of `enc` on arbitrary samples (`z_c = mu_c`).
pub fn evaluate_pretrain(
    enc: &Encoders<f32>,
    samples: &[&SensorSegment],
    contexts: &[ContextRecord],
    regime: &RegimeConfig,
    tau: f64,
) -> Result<LossComponents> {
    let (data, _) = prepare(samples, contexts)?;
    let idx: Vec<usize> = (0..data.samples.len()).collect();
    evaluate(enc, &data, &idx, regime, tau)
}

/// Trains both encoders and decoders on unlabeled sensor/context pairs.
///
/// The pool is split 90/10 (by default) into train and validation by a seeded
/// shuffle; the checkpoint returned is the epoch with the lowest validation
/// objective, including the untrained initialization as epoch 0.
pub fn run_pretrain(
    samples: &[&SensorSegment],
    contexts: &[ContextRecord],
    dims: Dims,
    regime: &RegimeConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(Encoders<f32>, PretrainReport)> {
    regime.validate()?;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(contract("pretraining needs at least one sample"));
    }
    let (data, n_contexts) = prepare(samples, contexts)?;
    let mut warnings = Vec::new();
    if n_contexts < 2 && regime.gamma > 0.0 {
        let msg = "only one context in the pretraining pool: contrastive term is degenerate";
        log::warn!("{msg}");
        warnings.push(msg.to_string());
    }

    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.shuffle(&mut RngState::new(seed, streams::SPLIT).rng());
    let n_val = if order.len() >= 2 {
        ((order.len() as f64 * cfg.val_fraction).round() as usize).clamp(
            usize::from(cfg.val_fraction > 0.0),
            order.len() - 1,
        )
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut enc = Encoders::<f32>::init(dims, seed)?;
    let eval_set: Vec<usize> = if val_idx.is_empty() { train_idx.clone() } else { val_idx.clone() };
    let initial_val = evaluate(&enc, &data, &eval_set, regime, cfg.tau)?;
    let mut best_store = enc.store.clone();
    let mut best_total = initial_val.total;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut degenerate = 0usize;
    let mut step = 0u64;
    let mut stop_reason = if cfg.max_epochs == 0 {
        StopReason::ZeroBudget
    } else {
        StopReason::MaxEpochs
    };

    let sampling = RngState::new(seed, streams::SAMPLING);
    let shuffling = RngState::new(seed, streams::SHUFFLE);
    for epoch in 1..=cfg.max_epochs {
        train_idx.sort_unstable();
        train_idx.shuffle(&mut shuffling.derive(epoch as u64).rng());
        let mut train = LossComponents::default();
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = make_batch(&enc, &data, chunk, Some(sampling.derive(step)))?;
            step += 1;
            let mut g = Graph::new();
            let t = pretrain_loss(&mut g, &enc, &enc.store, &batch, regime, cfg.tau)?;
            if t.con_degenerate {
                degenerate += 1;
            }
            train.add_weighted(&components(&g, &t), chunk.len() as f64);
            let grads = g.backward(t.total)?.for_store(&enc.store);
            cfg.optimizer.step(&mut enc.store, &grads)?;
        }
        let train = train.scaled(1.0 / train_idx.len() as f64);
        let val = evaluate(&enc, &data, &eval_set, regime, cfg.tau)?;
        log::debug!("pretrain epoch {epoch}: train {:.5} val {:.5}", train.total, val.total);
        epochs.push(EpochRecord { epoch, train, val });
        if val.total < best_total {
            best_total = val.total;
            best_epoch = epoch;
            best_store = enc.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }

    let best = Encoders::from_store(dims, best_store)?;
    let report = PretrainReport {
        regime: *regime,
        seed,
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        initial_val,
        epochs,
        best_epoch,
        best_val_total: best_total,
        stop_reason,
        degenerate_contrastive_batches: degenerate,
        warnings,
    };
    Ok((best, report))
}
