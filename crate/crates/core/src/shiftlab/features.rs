//! Model-free per-segment summary features used for shift measurement.

use serde::{Deserialize, Serialize};

use crate::encoders::SensorSegment;
use crate::parallel::{map_slice, Exec};

/// Number of equal-width spectral bands per channel.
pub const BANDS: usize = 4;
/// Features per channel: mean, std and the band energies.
pub const PER_CHANNEL: usize = 2 + BANDS;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    #[default]
    Summary,
    Raw,
}

impl std::str::FromStr for FeatureMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "summary" => Ok(Self::Summary),
            "raw" => Ok(Self::Raw),
            other => Err(crate::error::config("shift.features", format!("unknown feature mode {other:?}"))),
        }
    }
}

/// Precomputed DFT basis for segments of one length.
struct Dft {
    len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Dft {
    fn new(len: usize) -> Self {
        let bins = len / 2;
        let mut cos = Vec::with_capacity(bins * len);
        let mut sin = Vec::with_capacity(bins * len);
        for k in 1..=bins {
            for t in 0..len {
                let a = 2.0 * std::f64::consts::PI * (k * t % len) as f64 / len as f64;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Self { len, cos, sin }
    }

    /// Energy `|X_k|^2 / T` of bins `1..=T/2` summed into [`BANDS`] equal groups.
    fn band_energies(&self, x: &[f32], out: &mut [f64]) {
        let bins = self.len / 2;
        out.iter_mut().for_each(|v| *v = 0.0);
        if bins == 0 {
            return;
        }
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            let row = k * self.len;
            for (t, &v) in x.iter().enumerate() {
                re += v as f64 * self.cos[row + t];
                im -= v as f64 * self.sin[row + t];
            }
            let band = (k * BANDS / bins).min(BANDS - 1);
            out[band] += (re * re + im * im) / self.len as f64;
        }
    }
}

/// Unnormalized summary vector of length `6 C`.
pub fn summary_features(seg: &SensorSegment) -> Vec<f64> {
    summary_with(&Dft::new(seg.length), seg)
}

fn summary_with(dft: &Dft, seg: &SensorSegment) -> Vec<f64> {
    let mut out = Vec::with_capacity(seg.channels * PER_CHANNEL);
    let mut bands = [0.0; BANDS];
    for c in 0..seg.channels {
        let x = seg.channel(c);
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        out.push(mean);
        out.push(var.sqrt());
        dft.band_energies(x, &mut bands);
        out.extend_from_slice(&bands);
    }
    out
}

/// Feature vectors for a batch of segments (all of one shape).
pub fn extract(segs: &[&SensorSegment], mode: FeatureMode, exec: Exec) -> Vec<Vec<f64>> {
    match mode {
        FeatureMode::Raw => segs.iter().map(|s| s.values.iter().map(|&v| v as f64).collect()).collect(),
        FeatureMode::Summary => {
            let len = segs.first().map(|s| s.length).unwrap_or(0);
            let dft = Dft::new(len);
            map_slice(exec, segs, |s| summary_with(&dft, s))
        }
    }
}

/// Column-wise z-normalization in place using the statistics of all rows.
/// Constant columns are only centered.
pub fn z_normalize(rows: &mut [Vec<f64>]) {
    let Some(d) = rows.first().map(|r| r.len()) else {
        return;
    };
    let n = rows.len() as f64;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let inv = if std > 1e-12 { 1.0 / std } else { 1.0 };
        for r in rows.iter_mut() {
            r[j] = (r[j] - mean) * inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_tone_lands_in_its_band() {
        let t = 64;
        // bin 20 of 32 falls in band 2
        let vals: Vec<f32> = (0..t)
            .map(|i| (2.0 * std::f64::consts::PI * 20.0 * i as f64 / t as f64).sin() as f32)
            .collect();
        let seg = SensorSegment::new(1, t, vals, "x", None).unwrap();
        let f = summary_features(&seg);
        assert_eq!(f.len(), PER_CHANNEL);
        assert!(f[0].abs() < 1e-6);
        assert!((f[1] - 0.5f64.sqrt()).abs() < 1e-6);
        // Parseval: positive-frequency half carries half of sum(x^2) = T/4
        assert!((f[2 + 2] - t as f64 / 4.0).abs() < 1e-3);
        assert!(f[2] < 1e-6 && f[3] < 1e-6 && f[5] < 1e-6);
    }

    #[test]
    fn constant_segment_has_zero_std_and_no_ac_energy() {
        let seg = SensorSegment::new(2, 16, vec![3.0; 32], "x", None).unwrap();
        let f = summary_features(&seg);
        assert_eq!(f[0], 3.0);
        assert_eq!(f[1], 0.0);
        assert!(f[2..6].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn z_normalization_gives_zero_mean_unit_std() {
        let mut rows = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]];
        z_normalize(&mut rows);
        let m: f64 = rows.iter().map(|r| r[0]).sum::<f64>() / 3.0;
        let v: f64 = rows.iter().map(|r| r[0] * r[0]).sum::<f64>() / 3.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        assert!(rows.iter().all(|r| r[1] == 0.0));
    }
}
