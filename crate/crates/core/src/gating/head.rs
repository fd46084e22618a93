//! Projection branches, gating controller, fusion and classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{feature_len, raw_features, FeatureStats, GateMask};
use crate::encoders::{Linear, SensorSegment};
use crate::error::{config, contract, Result};
use crate::numerics::{softmax_f64, streams, Graph, ParamStore, Real, RngState, Tensor, Var};
use crate::parallel::{map_indexed, Exec};

/// How the two branches are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Softmax gate over the sensor and context branches.
    #[default]
    Gated,
    /// Sensor branch only (`alpha = [1, 0]`, no context parameters).
    SensorOnly,
    /// Fixed average of both branches.
    FixAdd,
    /// Classifier over the concatenation of both branches.
    FixConcat,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Gated => "gated",
            HeadKind::SensorOnly => "sensor_only",
            HeadKind::FixAdd => "fix_add",
            HeadKind::FixConcat => "fix_concat",
        }
    }

    pub fn has_gate(&self) -> bool {
        matches!(self, HeadKind::Gated)
    }

    pub fn has_context(&self) -> bool {
        !matches!(self, HeadKind::SensorOnly)
    }

    /// Branch weights for heads without a controller.
    pub fn fixed_alpha(&self) -> Option<[f64; 2]> {
        match self {
            HeadKind::Gated => None,
            HeadKind::SensorOnly => Some([1.0, 0.0]),
            HeadKind::FixAdd | HeadKind::FixConcat => Some([0.5, 0.5]),
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Self::Gated),
            "sensor_only" => Ok(Self::SensorOnly),
            "fix_add" => Ok(Self::FixAdd),
            "fix_concat" => Ok(Self::FixConcat),
            other => Err(config("head.kind", format!("unknown head kind {other:?}"))),
        }
    }
}

/// Layer widths of a head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadShape {
    pub latent: usize,
    pub hidden: usize,
    pub controller_hidden: usize,
    pub channels: usize,
    pub num_classes: usize,
}

impl HeadShape {
    pub fn features(&self) -> usize {
        feature_len(self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("latent", self.latent),
            ("hidden", self.hidden),
            ("controller_hidden", self.controller_hidden),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(config(format!("head.{k}"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Output of one forward pass for a single sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// `[alpha_sensor, alpha_context]`; nominal for heads without a gate.
    pub alpha: [f64; 2],
    pub h_sensor: Vec<f32>,
    /// Empty for the sensor-only head.
    pub h_context: Vec<f32>,
    /// Concatenation of both branches for `FixConcat`, the weighted sum otherwise.
    pub h_final: Vec<f32>,
    pub logits: Vec<f32>,
    pub y_hat: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Batched, already standardized head inputs.
#[derive(Clone, Debug)]
pub struct HeadBatch<T: Real> {
    pub z_x: Tensor<T>,
    pub z_c: Tensor<T>,
    pub features: Tensor<T>,
}

/// Inverted-dropout multipliers for both branches (`0` or `1 / (1 - p)`).
#[derive(Clone, Debug)]
pub struct DropoutMasks<T: Real> {
    pub sensor: Tensor<T>,
    pub context: Tensor<T>,
}

impl<T: Real> DropoutMasks<T> {
    pub fn sample<R: Rng>(rows: usize, hidden: usize, p: f64, rng: &mut R) -> Self {
        let keep = 1.0 - p;
        let mut draw = |_| {
            if p > 0.0 && rng.random::<f64>() < p {
                T::zero()
            } else {
                T::from_f64_lossy(1.0 / keep)
            }
        };
        let sensor = (0..rows * hidden).map(&mut draw).collect();
        let context = (0..rows * hidden).map(&mut draw).collect();
        Self {
            sensor: Tensor::from_vec(&[rows, hidden], sensor),
            context: Tensor::from_vec(&[rows, hidden], context),
        }
    }
}

/// Graph handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub h_sensor: Var,
    pub h_context: Option<Var>,
    pub alpha: Option<Var>,
    pub h_final: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
struct HeadIds {
    sensor: Linear,
    context: Option<Linear>,
    gate_hidden: Option<Linear>,
    gate_out: Option<Linear>,
    classifier: Linear,
}

/// Trainable stage-two parameters plus the gate-feature standardization.
#[derive(Clone, Debug)]
pub struct HeadParams<T: Real = f32> {
    pub kind: HeadKind,
    pub mask: GateMask,
    pub shape: HeadShape,
    pub dropout: f64,
    /// Gate-feature standardization.
    pub stats: FeatureStats,
    /// Standardization of `z_x` before the sensor projection.
    pub sensor_stats: FeatureStats,
    pub store: ParamStore<T>,
    ids: HeadIds,
}

impl<T: Real> HeadParams<T> {
    pub fn init(kind: HeadKind, mask: GateMask, shape: HeadShape, dropout: f64, seed: u64) -> Result<Self> {
        shape.validate()?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(config("customize.dropout", "must lie in [0, 1)"));
        }
        let mut rng = RngState::new(seed, streams::INIT).derive(1).rng();
        let mut store = ParamStore::new();
        let h = shape.hidden;
        Linear::new(&mut store, "head.sensor", shape.latent, h, &mut rng);
        if kind.has_context() {
            Linear::new(&mut store, "head.context", shape.latent, h, &mut rng);
        }
        if kind.has_gate() {
            Linear::new(&mut store, "head.gate.hidden", shape.features(), shape.controller_hidden, &mut rng);
            Linear::new(&mut store, "head.gate.out", shape.controller_hidden, 2, &mut rng);
        }
        let width = if kind == HeadKind::FixConcat { 2 * h } else { h };
        Linear::new(&mut store, "head.classifier", width, shape.num_classes, &mut rng);
        let stats = FeatureStats::identity(shape.features());
        let sensor_stats = FeatureStats::identity(shape.latent);
        Self::from_store(kind, mask, shape, dropout, stats, sensor_stats, store)
    }

    /// Rebuilds a head from stored parameters, checking names and shapes.
    pub fn from_store(
        kind: HeadKind,
        mask: GateMask,
        shape: HeadShape,
        dropout: f64,
        stats: FeatureStats,
        sensor_stats: FeatureStats,
        store: ParamStore<T>,
    ) -> Result<Self> {
        shape.validate()?;
        if stats.len() != shape.features() {
            return Err(contract(format!(
                "feature stats have {} entries, expected {}",
                stats.len(),
                shape.features()
            )));
        }
        if sensor_stats.len() != shape.latent {
            return Err(contract(format!(
                "embedding stats have {} entries, expected {}",
                sensor_stats.len(),
                shape.latent
            )));
        }
        let h = shape.hidden;
        let width = if kind == HeadKind::FixConcat { 2 * h } else { h };
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        let mut layer = |name: &str, i: usize, o: usize| {
            expected.push((format!("{name}.w"), vec![i, o]));
            expected.push((format!("{name}.b"), vec![o]));
        };
        layer("head.sensor", shape.latent, h);
        if kind.has_context() {
            layer("head.context", shape.latent, h);
        }
        if kind.has_gate() {
            layer("head.gate.hidden", shape.features(), shape.controller_hidden);
            layer("head.gate.out", shape.controller_hidden, 2);
        }
        layer("head.classifier", width, shape.num_classes);
        if store.len() != expected.len() {
            return Err(contract(format!(
                "{} head expects {} tensors, found {}",
                kind.as_str(),
                expected.len(),
                store.len()
            )));
        }
        for (name, dims) in &expected {
            let t = store
                .by_name(name)
                .ok_or_else(|| contract(format!("missing parameter {name}")))?;
            if t.shape() != dims.as_slice() {
                return Err(contract(format!("parameter {name} has shape {:?}, expected {dims:?}", t.shape())));
            }
        }
        let opt = |name: &str, present: bool| -> Result<Option<Linear>> {
            if present {
                Linear::resolve(&store, name).map(Some)
            } else {
                Ok(None)
            }
        };
        let ids = HeadIds {
            sensor: Linear::resolve(&store, "head.sensor")?,
            context: opt("head.context", kind.has_context())?,
            gate_hidden: opt("head.gate.hidden", kind.has_gate())?,
            gate_out: opt("head.gate.out", kind.has_gate())?,
            classifier: Linear::resolve(&store, "head.classifier")?,
        };
        Ok(Self {
            kind,
            mask,
            shape,
            dropout,
            stats,
            sensor_stats,
            store,
            ids,
        })
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        HeadParams {
            kind: self.kind,
            mask: self.mask,
            shape: self.shape,
            dropout: self.dropout,
            stats: self.stats.clone(),
            sensor_stats: self.sensor_stats.clone(),
            store: self.store.cast(),
            ids: self.ids,
        }
    }

    /// Forward pass over a batch; dropout is applied only when masks are given.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &HeadBatch<T>,
        dropout: Option<&DropoutMasks<T>>,
    ) -> HeadVars {
        let zx = g.input(batch.z_x.clone());
        let hs = self.ids.sensor.forward(g, store, zx);
        let mut hs = g.relu(hs);
        if let Some(m) = dropout {
            let mv = g.input(m.sensor.clone());
            hs = g.mul(hs, mv);
        }
        let hc = self.ids.context.map(|lin| {
            let zc = g.input(batch.z_c.clone());
            let hc = lin.forward(g, store, zc);
            let hc = g.relu(hc);
            match dropout {
                Some(m) => {
                    let mv = g.input(m.context.clone());
                    g.mul(hc, mv)
                }
                None => hc,
            }
        });
        let mut alpha = None;
        let h_final = match (self.kind, hc) {
            (HeadKind::SensorOnly, _) | (_, None) => hs,
            (HeadKind::FixAdd, Some(hc)) => {
                let s = g.add(hs, hc);
                g.scale(s, 0.5)
            }
            (HeadKind::FixConcat, Some(hc)) => g.concat_cols(hs, hc),
            (HeadKind::Gated, Some(hc)) => {
                let r = g.input(batch.features.clone());
                let u = self.ids.gate_hidden.expect("gated head").forward(g, store, r);
                let u = g.relu(u);
                let logits = self.ids.gate_out.expect("gated head").forward(g, store, u);
                let a = g.softmax_rows(logits);
                alpha = Some(a);
                let a_s = g.slice_cols(a, 0, 1);
                let a_c = g.slice_cols(a, 1, 1);
                let ws = g.mul_col(hs, a_s);
                let wc = g.mul_col(hc, a_c);
                g.add(ws, wc)
            }
        };
        let logits = self.ids.classifier.forward(g, store, h_final);
        HeadVars {
            h_sensor: hs,
            h_context: hc,
            alpha,
            h_final,
            logits,
        }
    }

    /// Controller logits from already standardized features (no other branches).
    pub fn gate_logits(&self, features: &[f64]) -> Result<Option<[f64; 2]>> {
        let (Some(hid), Some(out)) = (self.ids.gate_hidden, self.ids.gate_out) else {
            return Ok(None);
        };
        if features.len() != self.shape.features() {
            return Err(contract("gate feature length does not match the controller"));
        }
        let mut g = Graph::new();
        let r = g.input(Tensor::from_vec(
            &[1, features.len()],
            features.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        ));
        let u = hid.forward(&mut g, &self.store, r);
        let u = g.relu(u);
        let l = out.forward(&mut g, &self.store, u);
        let d = g.value(l).data();
        Ok(Some([d[0].as_f64(), d[1].as_f64()]))
    }
}

/// `softmax` over two controller logits.
pub fn gate_weights(logits: [f64; 2]) -> [f64; 2] {
    let p = softmax_f64(&logits);
    [p[0], p[1]]
}

/// Frozen-encoder outputs for one sample, with unstandardized gate features.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInput {
    pub z_x: Vec<f32>,
    pub z_c: Vec<f32>,
    pub raw: Vec<f64>,
}

impl HeadInput {
    pub fn new(z_x: Vec<f32>, z_c: Vec<f32>, seg: &SensorSegment) -> Result<Self> {
        let raw = raw_features(&z_x, &z_c, seg)?;
        Ok(Self { z_x, z_c, raw })
    }
}

impl HeadParams<f32> {
    /// Assembles a batch, standardizing and masking the gate features.
    pub fn batch(&self, inputs: &[&HeadInput]) -> Result<HeadBatch<f32>> {
        let d = self.shape.latent;
        let f = self.shape.features();
        let n = inputs.len();
        let mut zx = Vec::with_capacity(n * d);
        let mut zc = Vec::with_capacity(n * d);
        let mut feats = Vec::with_capacity(n * f);
        for inp in inputs {
            if inp.z_x.len() != d || inp.z_c.len() != d {
                return Err(contract(format!("head expects embeddings of length {d}")));
            }
            zx.extend(
                inp.z_x
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| ((v as f64 - self.sensor_stats.mean[j]) / self.sensor_stats.std[j]) as f32),
            );
            zc.extend_from_slice(&inp.z_c);
            feats.extend(self.stats.apply(&inp.raw, self.mask)?.into_iter().map(|v| v as f32));
        }
        Ok(HeadBatch {
            z_x: Tensor::from_vec(&[n, d], zx),
            z_c: Tensor::from_vec(&[n, d], zc),
            features: Tensor::from_vec(&[n, f], feats),
        })
    }

    /// Inference-mode decisions (no dropout), evaluated in chunks.
    pub fn decide_batch(&self, inputs: &[&HeadInput], exec: Exec) -> Result<Vec<GateDecision>> {
        const CHUNK: usize = 256;
        for inp in inputs {
            if inp.raw.len() != self.shape.features() {
                return Err(contract("gate feature length does not match the controller"));
            }
        }
        let chunks = inputs.len().div_ceil(CHUNK);
        let parts = map_indexed(exec, chunks, |ci| -> Result<Vec<GateDecision>> {
            let part = &inputs[ci * CHUNK..((ci + 1) * CHUNK).min(inputs.len())];
            let batch = self.batch(part)?;
            let mut g = Graph::new();
            let v = self.forward_graph(&mut g, &self.store, &batch, None);
            Ok(self.read_decisions(&g, &v, part.len()))
        });
        let mut out = Vec::with_capacity(inputs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn decide(&self, input: &HeadInput) -> Result<GateDecision> {
        Ok(self.decide_batch(&[input], Exec::Sequential)?.remove(0))
    }

    /// `fuse_and_classify` on raw frozen-encoder outputs.
    pub fn fuse_and_classify(&self, z_x: &[f32], z_c: &[f32], seg: &SensorSegment) -> Result<GateDecision> {
        self.decide(&HeadInput::new(z_x.to_vec(), z_c.to_vec(), seg)?)
    }

    fn read_decisions(&self, g: &Graph<f32>, v: &HeadVars, n: usize) -> Vec<GateDecision> {
        let row = |var: Var, i: usize| g.value(var).row(i).to_vec();
        (0..n)
            .map(|i| {
                let alpha = match v.alpha {
                    Some(a) => {
                        let r = g.value(a).row(i);
                        [r[0] as f64, r[1] as f64]
                    }
                    None => self.kind.fixed_alpha().expect("fixed head"),
                };
                let logits = row(v.logits, i);
                GateDecision {
                    alpha,
                    h_sensor: row(v.h_sensor, i),
                    h_context: v.h_context.map(|h| row(h, i)).unwrap_or_default(),
                    h_final: row(v.h_final, i),
                    y_hat: argmax(&logits),
                    logits,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> HeadShape {
        HeadShape {
            latent: 4,
            hidden: 3,
            controller_hidden: 5,
            channels: 2,
            num_classes: 3,
        }
    }

    fn input(seed: u64) -> HeadInput {
        let mut r = RngState::new(seed, streams::DATA).rng();
        let z_x: Vec<f32> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let z_c: Vec<f32> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let vals: Vec<f32> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let seg = SensorSegment::new(2, 4, vals, "c", None).unwrap();
        HeadInput::new(z_x, z_c, &seg).unwrap()
    }

    #[test]
    fn gate_weight_examples() {
        assert_eq!(gate_weights([0.7, 0.7]), [0.5, 0.5]);
        let a = gate_weights([3f64.ln(), 0.0]);
        assert!((a[0] - 0.75).abs() < 1e-12 && (a[1] - 0.25).abs() < 1e-12);
        assert!(gate_weights([20.0, 0.0])[0] > 0.999999);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn gated_fusion_identity_and_simplex() {
        let head = HeadParams::<f32>::init(HeadKind::Gated, GateMask::Full, shape(), 0.3, 4).unwrap();
        for s in 0..20 {
            let d = head.decide(&input(s)).unwrap();
            assert!(d.alpha.iter().all(|&a| a >= 0.0));
            assert!((d.alpha[0] + d.alpha[1] - 1.0).abs() < 1e-6);
            for j in 0..3 {
                let fused = d.alpha[0] * d.h_sensor[j] as f64 + d.alpha[1] * d.h_context[j] as f64;
                assert!((fused - d.h_final[j] as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sensor_only_uses_sensor_branch_exactly() {
        let head = HeadParams::<f32>::init(HeadKind::SensorOnly, GateMask::Full, shape(), 0.3, 4).unwrap();
        assert!(head.store.by_name("head.context.w").is_none());
        let d = head.decide(&input(1)).unwrap();
        assert_eq!(d.alpha, [1.0, 0.0]);
        assert_eq!(d.h_final, d.h_sensor);
        assert!(d.h_context.is_empty());
    }

    #[test]
    fn fixed_heads() {
        let add = HeadParams::<f32>::init(HeadKind::FixAdd, GateMask::Full, shape(), 0.0, 2).unwrap();
        let d = add.decide(&input(2)).unwrap();
        for j in 0..3 {
            assert!((0.5 * (d.h_sensor[j] + d.h_context[j]) - d.h_final[j]).abs() < 1e-6);
        }
        let cat = HeadParams::<f32>::init(HeadKind::FixConcat, GateMask::Full, shape(), 0.0, 2).unwrap();
        let d = cat.decide(&input(2)).unwrap();
        assert_eq!(d.h_final.len(), 6);
        assert_eq!(&d.h_final[..3], d.h_sensor.as_slice());
        assert_eq!(&d.h_final[3..], d.h_context.as_slice());
    }

    #[test]
    fn batch_matches_single() {
        let head = HeadParams::<f32>::init(HeadKind::Gated, GateMask::Full, shape(), 0.3, 9).unwrap();
        let inputs: Vec<HeadInput> = (0..7).map(input).collect();
        let refs: Vec<&HeadInput> = inputs.iter().collect();
        let batch = head.decide_batch(&refs, Exec::Parallel).unwrap();
        for (i, inp) in inputs.iter().enumerate() {
            assert_eq!(head.decide(inp).unwrap().y_hat, batch[i].y_hat);
        }
    }

    #[test]
    fn from_store_rejects_wrong_kind() {
        let head = HeadParams::<f32>::init(HeadKind::FixAdd, GateMask::Full, shape(), 0.3, 1).unwrap();
        let err = HeadParams::from_store(
            HeadKind::Gated,
            GateMask::Full,
            shape(),
            0.3,
            head.stats.clone(),
            head.sensor_stats.clone(),
            head.store.clone(),
        );
        assert!(err.is_err());
    }
}
