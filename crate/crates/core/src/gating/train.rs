//! Stage-two training of a head over frozen encoders.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::{FeatureStats, GateMask};
use super::head::{DropoutMasks, HeadInput, HeadKind, HeadParams, HeadShape};
use super::losses::{customize_loss_graph, DEFAULT_LAMBDA_BALANCE};
use crate::encoders::{ContextRecord, Encoders, SensorSegment};
use crate::error::{config, contract, Result};
use crate::numerics::{streams, AdamW, Graph, RngState};
use crate::parallel::Exec;
use crate::pretraining::train::prefix_key;
use crate::pretraining::StopReason;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CustomizeConfig {
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of the labeled subset held out (per class) for early stopping.
    pub val_fraction: f64,
    pub lambda_balance: f64,
    pub dropout: f64,
    pub hidden: usize,
    pub controller_hidden: usize,
}

impl Default for CustomizeConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamW {
                lr: 0.03,
                ..AdamW::default()
            },
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            val_fraction: 0.2,
            lambda_balance: DEFAULT_LAMBDA_BALANCE,
            dropout: 0.3,
            hidden: 32,
            controller_hidden: 16,
        }
    }
}

impl CustomizeConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer
            .validate()
            .map_err(|e| prefix_key(e, "customize.optimizer"))?;
        if self.batch_size == 0 {
            return Err(config("customize.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config("customize.val_fraction", "must lie in [0, 1)"));
        }
        if !(self.lambda_balance >= 0.0) || !self.lambda_balance.is_finite() {
            return Err(config("customize.lambda_balance", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config("customize.dropout", "must lie in [0, 1)"));
        }
        if self.hidden == 0 {
            return Err(config("customize.hidden", "must be positive"));
        }
        if self.controller_hidden == 0 {
            return Err(config("customize.controller_hidden", "must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch losses; `mean_alpha` is measured on the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEpoch {
    pub epoch: usize,
    pub train_ce: f64,
    pub train_balance: f64,
    pub train_total: f64,
    pub val_ce: f64,
    pub val_balance: f64,
    pub val_total: f64,
    pub mean_alpha: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomizeReport {
    pub kind: HeadKind,
    pub mask: GateMask,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub lambda_balance: f64,
    pub initial_val_total: f64,
    pub epochs: Vec<HeadEpoch>,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub stop_reason: StopReason,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

/// Seeded per-class subsample of `fraction` of the indices (at least one per
/// class whenever `fraction * class_count >= 1`, rounding to nearest otherwise).
pub fn stratified_subsample(labels: &[usize], fraction: f64, rng: RngState) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config("customize.budget", "must lie in (0, 1]"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut out = Vec::new();
    for (class, mut idx) in by_class {
        let want = (idx.len() as f64 * fraction).round() as usize;
        let want = want.max(usize::from(idx.len() as f64 * fraction >= 1.0)).min(idx.len());
        idx.shuffle(&mut rng.derive(class as u64).rng());
        out.extend_from_slice(&idx[..want]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Per-class split of `0..labels.len()` into (train, val).
fn stratified_split(labels: &[usize], val_fraction: f64, rng: RngState) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        idx.shuffle(&mut rng.derive(class as u64).rng());
        let n_val = if idx.len() >= 2 && val_fraction > 0.0 {
            ((idx.len() as f64 * val_fraction).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Frozen-encoder inputs for labeled samples (`z_c = mu_c`).
pub fn head_inputs(
    enc: &Encoders<f32>,
    samples: &[&SensorSegment],
    contexts: &[ContextRecord],
    exec: Exec,
) -> Result<Vec<HeadInput>> {
    let mut mu: HashMap<&str, Vec<f32>> = HashMap::new();
    for c in contexts {
        if !mu.contains_key(c.context_id.as_str()) {
            mu.insert(c.context_id.as_str(), enc.context_embedding(c)?);
        }
    }
    let zx = enc.encode_sensor_batch(samples, exec)?;
    samples
        .iter()
        .zip(zx)
        .map(|(s, z_x)| {
            let z_c = mu
                .get(s.context_id.as_str())
                .ok_or_else(|| contract(format!("no context record for `{}`", s.context_id)))?;
            HeadInput::new(z_x, z_c.clone(), s)
        })
        .collect()
}

#[derive(Default)]
struct Sums {
    ce: f64,
    balance: f64,
    total: f64,
    alpha: [f64; 2],
    n: f64,
}

impl Sums {
    fn mean(&self) -> (f64, f64, f64, [f64; 2]) {
        let n = self.n.max(1.0);
        (
            self.ce / n,
            self.balance / n,
            self.total / n,
            [self.alpha[0] / n, self.alpha[1] / n],
        )
    }
}

fn evaluate(head: &HeadParams<f32>, inputs: &[&HeadInput], labels: &[usize], lambda: f64) -> Result<Sums> {
    let mut s = Sums::default();
    if inputs.is_empty() {
        return Ok(s);
    }
    // one batch so the balance term is computed over the whole split
    let batch = head.batch(inputs)?;
    let mut g = Graph::new();
    let v = head.forward_graph(&mut g, &head.store, &batch, None);
    let t = customize_loss_graph(&mut g, v.logits, v.alpha, labels, lambda)?;
    let n = inputs.len() as f64;
    s.ce = g.scalar(t.ce) as f64 * n;
    s.balance = t.balance.map(|b| g.scalar(b) as f64).unwrap_or(0.0) * n;
    s.total = g.scalar(t.total) as f64 * n;
    match v.alpha {
        Some(a) => {
            for i in 0..inputs.len() {
                let r = g.value(a).row(i);
                s.alpha[0] += r[0] as f64;
                s.alpha[1] += r[1] as f64;
            }
        }
        None => {
            let fixed = head.kind.fixed_alpha().expect("fixed head");
            s.alpha = [fixed[0] * n, fixed[1] * n];
        }
    }
    s.n = n;
    Ok(s)
}

/// Trains a head on labeled source samples over frozen encoders.
#[allow(clippy::too_many_arguments)]
pub fn run_customize(
    enc: &Encoders<f32>,
    samples: &[&SensorSegment],
    contexts: &[ContextRecord],
    kind: HeadKind,
    mask: GateMask,
    num_classes: usize,
    cfg: &CustomizeConfig,
    seed: u64,
) -> Result<(HeadParams<f32>, CustomizeReport)> {
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| contract("customization samples must be labeled")))
        .collect::<Result<_>>()?;
    let before = enc.encoder_hash();
    let inputs = head_inputs(enc, samples, contexts, Exec::available())?;
    let refs: Vec<&HeadInput> = inputs.iter().collect();
    let (head, mut report) = train_head(&refs, &labels, enc.dims.latent, enc.dims.channels, kind, mask, num_classes, cfg, seed)?;
    report.encoder_hash_before = before;
    report.encoder_hash_after = enc.encoder_hash();
    if report.encoder_hash_before != report.encoder_hash_after {
        return Err(contract("encoder parameters changed during customization"));
    }
    Ok((head, report))
}

/// Trains a head on precomputed frozen-encoder inputs.
#[allow(clippy::too_many_arguments)]
pub fn train_head(
    inputs: &[&HeadInput],
    labels: &[usize],
    latent: usize,
    channels: usize,
    kind: HeadKind,
    mask: GateMask,
    num_classes: usize,
    cfg: &CustomizeConfig,
    seed: u64,
) -> Result<(HeadParams<f32>, CustomizeReport)> {
    cfg.validate()?;
    if inputs.len() != labels.len() {
        return Err(contract("inputs and labels disagree in length"));
    }
    if num_classes == 0 {
        return Err(config("dataset.num_classes", "must be positive"));
    }
    if inputs.len() < num_classes {
        return Err(config(
            "customize.budget",
            format!("{} labeled samples is fewer than the {num_classes} classes", inputs.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(contract(format!("label {bad} out of range for {num_classes} classes")));
    }
    let shape = HeadShape {
        latent,
        hidden: cfg.hidden,
        controller_hidden: cfg.controller_hidden,
        channels,
        num_classes,
    };
    let mut head = HeadParams::<f32>::init(kind, mask, shape, cfg.dropout, seed)?;
    let (mut train_idx, val_idx) = stratified_split(labels, cfg.val_fraction, RngState::new(seed, streams::SPLIT).derive(1));
    let raw: Vec<Vec<f64>> = train_idx.iter().map(|&i| inputs[i].raw.clone()).collect();
    head.stats = FeatureStats::fit(&raw)?;
    let zx: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| inputs[i].z_x.iter().map(|&v| v as f64).collect())
        .collect();
    head.sensor_stats = FeatureStats::fit(&zx)?;

    let pick = |idx: &[usize]| -> (Vec<&HeadInput>, Vec<usize>) {
        (idx.iter().map(|&i| inputs[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let eval_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx.clone() };
    let (val_in, val_y) = pick(&eval_idx);
    let initial = evaluate(&head, &val_in, &val_y, cfg.lambda_balance)?.mean().2;
    let mut best = (initial, 0usize, head.store.clone());
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = if cfg.max_epochs == 0 {
        StopReason::ZeroBudget
    } else {
        StopReason::MaxEpochs
    };
    let shuffling = RngState::new(seed, streams::SHUFFLE).derive(1);
    let dropping = RngState::new(seed, streams::DROPOUT);
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        train_idx.sort_unstable();
        train_idx.shuffle(&mut shuffling.derive(epoch as u64).rng());
        let mut train = Sums::default();
        for chunk in train_idx.chunks(cfg.batch_size) {
            let (b_in, b_y) = pick(chunk);
            let batch = head.batch(&b_in)?;
            let masks = DropoutMasks::sample(chunk.len(), cfg.hidden, cfg.dropout, &mut dropping.derive(step).rng());
            step += 1;
            let mut g = Graph::new();
            let v = head.forward_graph(&mut g, &head.store, &batch, Some(&masks));
            let t = customize_loss_graph(&mut g, v.logits, v.alpha, &b_y, cfg.lambda_balance)?;
            let n = chunk.len() as f64;
            train.ce += g.scalar(t.ce) as f64 * n;
            train.balance += t.balance.map(|b| g.scalar(b) as f64).unwrap_or(0.0) * n;
            train.total += g.scalar(t.total) as f64 * n;
            train.n += n;
            let grads = g.backward(t.total)?.for_store(&head.store);
            cfg.optimizer.step(&mut head.store, &grads)?;
        }
        let (train_ce, train_balance, train_total, _) = train.mean();
        let (val_ce, val_balance, val_total, mean_alpha) =
            evaluate(&head, &val_in, &val_y, cfg.lambda_balance)?.mean();
        epochs.push(HeadEpoch {
            epoch,
            train_ce,
            train_balance,
            train_total,
            val_ce,
            val_balance,
            val_total,
            mean_alpha,
        });
        if val_total < best.0 {
            best = (val_total, epoch, head.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    let (best_val_total, best_epoch, store) = best;
    head.store.load_values(&store)?;
    let report = CustomizeReport {
        kind,
        mask,
        seed,
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        lambda_balance: cfg.lambda_balance,
        initial_val_total: initial,
        epochs,
        best_epoch,
        best_val_total,
        stop_reason,
        encoder_hash_before: String::new(),
        encoder_hash_after: String::new(),
    };
    Ok((head, report))
}
