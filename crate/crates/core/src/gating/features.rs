//! Gate inputs: alignment between the two embeddings plus segment statistics.

use serde::{Deserialize, Serialize};

use crate::encoders::SensorSegment;
use crate::error::{contract, Result};

/// Floor on the standard deviation used for standardization.
pub const STD_FLOOR: f64 = 1e-6;
/// Number of alignment features (cosine and sensor-embedding norm).
pub const ALIGN_FEATURES: usize = 2;

/// Length of the gate feature vector for `channels` input channels.
pub fn feature_len(channels: usize) -> usize {
    ALIGN_FEATURES + 2 * channels + 1
}

/// Which feature groups reach the controller.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMask {
    #[default]
    Full,
    AlignOnly,
    DynOnly,
}

impl GateMask {
    /// Whether feature `i` survives the mask.
    pub fn keeps(&self, i: usize) -> bool {
        match self {
            GateMask::Full => true,
            GateMask::AlignOnly => i < ALIGN_FEATURES,
            GateMask::DynOnly => i >= ALIGN_FEATURES,
        }
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// `z / ||z||`, or zeros for a zero vector. This is the context half of the
/// gate input that the streaming cache keeps.
pub fn unit(z: &[f32]) -> Vec<f32> {
    let n = norm(z);
    if n > 0.0 {
        z.iter().map(|&v| (v as f64 / n) as f32).collect()
    } else {
        vec![0.0; z.len()]
    }
}

/// Unstandardized features with a pre-normalized context embedding.
pub fn raw_features_unit(z_x: &[f32], zc_unit: &[f32], seg: &SensorSegment) -> Result<Vec<f64>> {
    if z_x.len() != zc_unit.len() {
        return Err(contract(format!(
            "embedding lengths differ: {} vs {}",
            z_x.len(),
            zc_unit.len()
        )));
    }
    let nx = norm(z_x);
    let cos = if nx > 0.0 {
        let dot: f64 = z_x.iter().zip(zc_unit).map(|(&a, &b)| a as f64 * b as f64).sum();
        (dot / nx).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(feature_len(seg.channels));
    out.push(cos);
    out.push(nx);
    let mut stds = Vec::with_capacity(seg.channels);
    let mut total = 0.0;
    for c in 0..seg.channels {
        let x = seg.channel(c);
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        total += x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        out.push(mean);
        stds.push(var.sqrt());
    }
    out.extend(stds);
    out.push(total.sqrt());
    Ok(out)
}

/// `[cos(z_x, z_c), ||z_x||, channel means, channel stds, global norm]`.
pub fn raw_features(z_x: &[f32], z_c: &[f32], seg: &SensorSegment) -> Result<Vec<f64>> {
    raw_features_unit(z_x, &unit(z_c), seg)
}

/// Per-feature standardization statistics captured on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Identity standardization for `len` features.
    pub fn identity(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            std: vec![1.0; len],
        }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| contract("cannot fit feature stats on no rows"))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(contract("feature rows differ in length"));
            }
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2));
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Standardizes `raw` and zeroes the groups removed by `mask`.
    pub fn apply(&self, raw: &[f64], mask: GateMask) -> Result<Vec<f64>> {
        if raw.len() != self.len() {
            return Err(contract(format!(
                "expected {} gate features, got {}",
                self.len(),
                raw.len()
            )));
        }
        Ok(raw
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if mask.keeps(i) {
                    (v - self.mean[i]) / self.std[i]
                } else {
                    0.0
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(values: Vec<f32>) -> SensorSegment {
        SensorSegment::new(2, values.len() / 2, values, "c", None).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let s = seg(vec![1.0, 2.0, 3.0, 4.0]);
        let z = [0.3, -0.4, 1.2];
        assert!((raw_features(&z, &z, &s).unwrap()[0] - 1.0).abs() < 1e-7);
        let f = raw_features(&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &s).unwrap();
        assert_eq!(f[0], 0.0);
        let f = raw_features(&[0.0; 3], &[0.0, 2.0, 0.0], &s).unwrap();
        assert_eq!(f[0], 0.0);
        let f = raw_features(&[1.0, 0.0, 0.0], &[0.0; 3], &s).unwrap();
        assert_eq!(f[0], 0.0);
    }

    #[test]
    fn layout_and_constant_segment() {
        let s = seg(vec![2.0, 2.0, 2.0, -1.0, -1.0, -1.0]);
        let f = raw_features(&[3.0, 4.0], &[1.0, 0.0], &s).unwrap();
        assert_eq!(f.len(), feature_len(2));
        assert!((f[1] - 5.0).abs() < 1e-12);
        assert_eq!(&f[2..4], &[2.0, -1.0]);
        assert_eq!(&f[4..6], &[0.0, 0.0]);
        assert!((f[6] - 15f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stats_standardize_and_floor() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let st = FeatureStats::fit(&rows).unwrap();
        assert_eq!(st.std[1], STD_FLOOR);
        assert_eq!(st.apply(&[3.0, 5.0], GateMask::Full).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn masks_zero_their_groups() {
        let st = FeatureStats::identity(feature_len(1));
        let raw = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(st.apply(&raw, GateMask::AlignOnly).unwrap(), vec![1.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(st.apply(&raw, GateMask::DynOnly).unwrap(), vec![0.0, 0.0, 3.0, 4.0, 5.0]);
    }
}
