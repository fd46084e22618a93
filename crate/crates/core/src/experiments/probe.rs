//! Linear probe and cluster diagnostics on frozen context embeddings.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{ContextRecord, Encoders};
use crate::error::{contract, Result};
use crate::numerics::{streams, AdamW, Graph, ParamStore, RngState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub contexts: Vec<String>,
    /// Held-out accuracy of the multinomial probe; absent with a single context.
    pub probe_accuracy: Option<f64>,
    pub silhouette: f64,
    /// Set when every embedding coincides and the silhouette is undefined.
    pub silhouette_degenerate: bool,
    /// Euclidean distances between context centroids, row-major.
    pub centroid_distances: Vec<Vec<f64>>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distance. Points in singleton clusters score 0.
/// Returns `(score, degenerate)`; degenerate means all points coincide.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<(f64, bool)> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(contract("silhouette needs one label per point"));
    }
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    if points.iter().all(|p| p == &points[0]) {
        return Ok((0.0, true));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok((total / points.len() as f64, false))
}

/// Trains a softmax-regression probe and returns held-out accuracy.
pub fn linear_probe(points: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<f64> {
    let n = points.len();
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    if n < 2 || k < 2 {
        return Err(contract("probe needs at least two points and two classes"));
    }
    let d = points[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngState::new(seed, streams::PROBE).rng());
    let n_test = ((n as f64 * 0.2).round() as usize).clamp(1, n - 1);
    let (test, train) = order.split_at(n_test);

    // standardize with training statistics
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train {
        mean.iter_mut().zip(&points[i]).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        std.iter_mut().zip(points[i].iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2));
    }
    std.iter_mut().for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-6));
    let rows = |idx: &[usize]| -> Tensor<f64> {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(points[i].iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]));
        }
        Tensor::from_vec(&[idx.len(), d], data)
    };
    let x_train = rows(train);
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

    let mut store = ParamStore::<f64>::new();
    let w = store.insert_zeros("probe.w", &[d, k]);
    let b = store.insert_zeros("probe.b", &[k]);
    let opt = AdamW {
        lr: 0.05,
        weight_decay: 0.0,
        ..AdamW::default()
    };
    for _ in 0..300 {
        let mut g = Graph::new();
        let x = g.input(x_train.clone());
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let l = g.matmul(x, wv);
        let l = g.add_bias(l, bv);
        let loss = g.cross_entropy(l, &y_train);
        let grads = g.backward(loss)?.for_store(&store);
        opt.step(&mut store, &grads)?;
    }
    let mut g = Graph::new();
    let x = g.input(rows(test));
    let wv = g.param(&store, w);
    let bv = g.param(&store, b);
    let l = g.matmul(x, wv);
    let l = g.add_bias(l, bv);
    let logits = g.value(l);
    let correct = test
        .iter()
        .enumerate()
        .filter(|(r, &i)| crate::gating::argmax(logits.row(*r)) == labels[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Probes `mu_c` over labeled embedding instances.
///
/// `instances` lists the context id of every sample to embed (typically one per
/// dataset sample, so each context contributes proportionally to its size).
pub fn probe_context_embeddings(
    enc: &Encoders<f32>,
    contexts: &[ContextRecord],
    instances: &[&str],
    seed: u64,
) -> Result<ProbeReport> {
    let mut names: Vec<String> = Vec::new();
    let mut mus: Vec<Vec<f64>> = Vec::new();
    for c in contexts {
        if !names.contains(&c.context_id) {
            names.push(c.context_id.clone());
            mus.push(enc.context_embedding(c)?.iter().map(|&v| v as f64).collect());
        }
    }
    let mut points = Vec::with_capacity(instances.len());
    let mut labels = Vec::with_capacity(instances.len());
    for id in instances {
        let l = names
            .iter()
            .position(|n| n == id)
            .ok_or_else(|| contract(format!("no context record for `{id}`")))?;
        points.push(mus[l].clone());
        labels.push(l);
    }
    if points.is_empty() {
        return Err(contract("probe needs at least one instance"));
    }
    let present: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let centroid_distances = mus.iter().map(|a| mus.iter().map(|b| dist(a, b)).collect()).collect();
    if present.len() < 2 {
        log::warn!("probe skipped: a single context is present");
        return Ok(ProbeReport {
            contexts: names,
            probe_accuracy: None,
            silhouette: 0.0,
            silhouette_degenerate: true,
            centroid_distances,
        });
    }
    let (sil, degenerate) = silhouette(&points, &labels)?;
    let acc = linear_probe(&points, &labels, seed)?;
    Ok(ProbeReport {
        contexts: names,
        probe_accuracy: Some(acc),
        silhouette: sil,
        silhouette_degenerate: degenerate,
        centroid_distances,
    })
}
