// Finite-difference checks of every loss term on random small instances, in f64.
// Shared by the core gradient tests and the acceptance target.

use chorus_core::encoders::{Dims, Encoders, SensorSegment};
use chorus_core::gating::{balance_loss_graph, customize_loss_graph, DropoutMasks, GateMask, HeadBatch, HeadKind, HeadParams, HeadShape};
use chorus_core::numerics::{grad_check, streams, GradCheck, ParamStore, RngState, Tensor};
use chorus_core::pretraining::{kl_loss, pretrain_loss, recon_loss, supcon_loss, PretrainBatch, RegimeConfig, RegimeName};
use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const LOSSES: [&str; 7] = ["recon", "kl", "con", "ce", "balance", "pre", "custom"];

pub fn tiny_dims() -> Dims {
    Dims {
        channels: 2,
        length: 12,
        latent: 4,
        text: 6,
        conv1: 3,
        conv2: 3,
        kernel: 3,
        stride: 2,
        context_hidden: 5,
        decoder_hidden: 5,
    }
}

fn normal(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| r.sample::<f64, _>(StandardNormal) * scale).collect();
    Tensor::from_vec(shape, v)
}

fn segments(r: &mut ChaCha8Rng, dims: &Dims, n: usize) -> Vec<SensorSegment> {
    (0..n)
        .map(|_| {
            let v = (0..dims.channels * dims.length).map(|_| r.random_range(-1.0f32..1.0)).collect();
            SensorSegment::new(dims.channels, dims.length, v, "c", None).unwrap()
        })
        .collect()
}

/// One random instance of `loss`; returns the grad check report.
pub fn check_instance(loss: &str, seed: u64) -> GradCheck {
    let state = RngState::new(seed, streams::INIT).derive(1000);
    let mut r = state.rng();
    let pick = state.derive(1);
    match loss {
        "recon" => {
            let dims = tiny_dims();
            let enc = Encoders::<f64>::init(dims, seed).unwrap();
            let mut store = enc.store.clone();
            let zx = store.insert("in.z_x", normal(&mut r, &[3, dims.latent], 1.0));
            let zc = store.insert("in.z_c", normal(&mut r, &[3, dims.latent], 1.0));
            let x = normal(&mut r, &[3, dims.channels * dims.length], 1.0);
            let c = normal(&mut r, &[3, dims.text], 0.5);
            grad_check(&store, STEP, None, pick, |g, s| {
                let a = g.param(s, zx);
                let b = g.param(s, zc);
                Ok(recon_loss(g, &enc, s, a, b, &x, &c, 1.0, 0.7)?.recon)
            })
            .unwrap()
        }
        "kl" => {
            let mut store = ParamStore::new();
            let mu = store.insert("mu", normal(&mut r, &[3, 4], 1.5));
            let lv = store.insert("logvar", normal(&mut r, &[3, 4], 1.5));
            grad_check(&store, STEP, None, pick, |g, s| {
                let a = g.param(s, mu);
                let b = g.param(s, lv);
                kl_loss(g, a, b)
            })
            .unwrap()
        }
        "con" => {
            let mut store = ParamStore::new();
            let z = store.insert("z", normal(&mut r, &[6, 4], 1.0));
            let labels: Vec<usize> = (0..6).map(|i| if i < 2 { 0 } else { r.random_range(0..3) }).collect();
            let tau = r.random_range(0.2..1.0);
            grad_check(&store, STEP, None, pick, |g, s| {
                let a = g.param(s, z);
                Ok(supcon_loss(g, a, &labels, tau)?.0)
            })
            .unwrap()
        }
        "ce" => {
            let mut store = ParamStore::new();
            let l = store.insert("logits", normal(&mut r, &[5, 6], 2.0));
            let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
            grad_check(&store, STEP, None, pick, |g, s| {
                let a = g.param(s, l);
                Ok(g.cross_entropy(a, &labels))
            })
            .unwrap()
        }
        "balance" => {
            let mut store = ParamStore::new();
            let l = store.insert("gate_logits", normal(&mut r, &[5, 2], 2.0));
            grad_check(&store, STEP, None, pick, |g, s| {
                let a = g.param(s, l);
                let alpha = g.softmax_rows(a);
                balance_loss_graph(g, alpha)
            })
            .unwrap()
        }
        "pre" => {
            let dims = tiny_dims();
            let enc = Encoders::<f64>::init(dims, seed).unwrap();
            let segs = segments(&mut r, &dims, 4);
            let refs: Vec<&SensorSegment> = segs.iter().collect();
            let batch = PretrainBatch {
                x_input: enc.segments_input(&refs).unwrap(),
                x_target: enc.segments_target(&refs).unwrap(),
                c_features: normal(&mut r, &[4, dims.text], 0.5),
                context_labels: vec![0, 1, 0, 1],
                eps: Some(normal(&mut r, &[4, dims.latent], 1.0)),
            };
            // Every regime weighting, reporting the worst.
            let mut worst: Option<GradCheck> = None;
            for name in [RegimeName::Weak, RegimeName::Medium, RegimeName::Strong] {
                let regime = RegimeConfig::named(name);
                let c = grad_check(&enc.store, STEP, None, pick, |g, s| {
                    Ok(pretrain_loss(g, &enc, s, &batch, &regime, 0.5)?.total)
                })
                .unwrap();
                if worst.as_ref().is_none_or(|w| c.max_rel_error > w.max_rel_error) {
                    worst = Some(c);
                }
            }
            worst.unwrap()
        }
        "custom" => {
            let shape = HeadShape {
                latent: 4,
                hidden: 5,
                controller_hidden: 3,
                channels: 2,
                num_classes: 3,
            };
            let head = HeadParams::<f64>::init(HeadKind::Gated, GateMask::Full, shape, 0.3, seed).unwrap();
            let n = 6;
            let batch = HeadBatch {
                z_x: normal(&mut r, &[n, shape.latent], 1.0),
                z_c: normal(&mut r, &[n, shape.latent], 1.0),
                features: normal(&mut r, &[n, shape.features()], 1.0),
            };
            let masks = DropoutMasks::sample(n, shape.hidden, 0.3, &mut r);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
            grad_check(&head.store, STEP, None, pick, |g, s| {
                let v = head.forward_graph(g, s, &batch, Some(&masks));
                Ok(customize_loss_graph(g, v.logits, v.alpha, &labels, 0.5)?.total)
            })
            .unwrap()
        }
        other => panic!("unknown loss {other}"),
    }
}

#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub loss: &'static str,
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose stencil straddled a ReLU or clamp kink.
    pub skipped: usize,
}

/// Worst relative error per loss over `instances` random instances.
pub fn run_suite(instances: u64) -> Vec<SuiteRow> {
    LOSSES
        .iter()
        .map(|&loss| {
            let mut row = SuiteRow { loss, worst: 0.0, checked: 0, skipped: 0 };
            for i in 0..instances {
                let c = check_instance(loss, i);
                row.worst = row.worst.max(c.max_rel_error);
                row.checked += c.checked;
                row.skipped += c.skipped;
            }
            row
        })
        .collect()
}
