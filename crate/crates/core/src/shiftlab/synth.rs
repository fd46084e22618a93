//! Synthetic multichannel dataset with a controllable context shift.
//!
//! Each class is a sum of two sinusoids per channel with class-specific
//! frequencies, phases and amplitudes. A context applies the channel-mixing
//! rotation `exp(s * A)` (the geodesic from the identity toward a fixed seeded
//! rotation `exp(A)`), a gain, and additive Gaussian noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{ContextRecord, SensorSegment};
use crate::error::{config, Result};
use crate::numerics::{streams, RngState};
use crate::parallel::{map_indexed, Exec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub name: String,
    /// Free-text description fed to the context encoder; defaults to the name.
    #[serde(default)]
    pub description: Option<String>,
    /// Position along the rotation path, in `[0, 1]`.
    pub shift: f64,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub noise: f64,
}

fn one() -> f64 {
    1.0
}

impl ContextSpec {
    pub fn new(name: &str, shift: f64, gain: f64, noise: f64) -> Self {
        Self {
            name: name.to_string(),
            description: None,
            shift,
            gain,
            noise,
        }
    }

    pub fn description(&self) -> &str {
        self.description.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub length: usize,
    pub contexts: Vec<ContextSpec>,
    pub samples_per_cell: usize,
    pub seed: u64,
    /// Rotation angle (radians) reached at `shift = 1`.
    #[serde(default = "default_angle")]
    pub max_angle: f64,
    /// Ratio between the loudest and the quietest class amplitude.
    #[serde(default = "default_energy_ratio")]
    pub class_energy_ratio: f64,
    /// Half-width of the uniform per-sample phase jitter (radians).
    #[serde(default = "default_phase_jitter")]
    pub phase_jitter: f64,
    /// Standard deviation of the per-sample relative amplitude jitter.
    #[serde(default = "default_amp_jitter")]
    pub amp_jitter: f64,
    /// Dimension of the hashed description features.
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
}

fn default_angle() -> f64 {
    PI / 2.0
}
fn default_energy_ratio() -> f64 {
    3.0
}
fn default_phase_jitter() -> f64 {
    PI
}
fn default_amp_jitter() -> f64 {
    0.1
}
fn default_text_dim() -> usize {
    crate::encoders::text::DEFAULT_TEXT_DIM
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::default_imu_like(0)
    }
}

impl SyntheticSpec {
    /// Six classes, two source placements and three targets of increasing shift.
    pub fn default_imu_like(seed: u64) -> Self {
        Self {
            num_classes: 6,
            channels: 3,
            length: 128,
            contexts: vec![
                ContextSpec::new("Left pocket", 0.1, 1.0, 0.3),
                ContextSpec::new("Right pocket", 0.15, 1.0, 0.3),
                ContextSpec::new("Upper arm", 0.2, 1.0, 0.3),
                ContextSpec::new("Wrist", 0.5, 1.0, 0.3),
                ContextSpec::new("Belt", 0.9, 1.0, 0.3),
            ],
            samples_per_cell: 400,
            seed,
            max_angle: default_angle(),
            class_energy_ratio: default_energy_ratio(),
            phase_jitter: default_phase_jitter(),
            amp_jitter: default_amp_jitter(),
            text_dim: default_text_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(config("dataset.num_classes", "must be positive"));
        }
        if self.channels == 0 {
            return Err(config("dataset.channels", "must be positive"));
        }
        if self.length == 0 {
            return Err(config("dataset.length", "must be positive"));
        }
        if self.text_dim == 0 {
            return Err(config("dataset.text_dim", "must be positive"));
        }
        if self.class_energy_ratio < 1.0 {
            return Err(config("dataset.class_energy_ratio", "must be at least 1"));
        }
        if self.phase_jitter < 0.0 || self.amp_jitter < 0.0 {
            return Err(config("dataset.phase_jitter", "jitter must be non-negative"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, c) in self.contexts.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.shift) {
                return Err(config(format!("dataset.contexts[{i}].shift"), "must lie in [0, 1]"));
            }
            if !(c.noise >= 0.0) {
                return Err(config(format!("dataset.contexts[{i}].noise"), "must be non-negative"));
            }
            if !c.gain.is_finite() {
                return Err(config(format!("dataset.contexts[{i}].gain"), "must be finite"));
            }
            if !names.insert(c.name.clone()) {
                return Err(config(format!("dataset.contexts[{i}].name"), "duplicate context name"));
            }
        }
        Ok(())
    }

    pub fn context(&self, name: &str) -> Option<&ContextSpec> {
        self.contexts.iter().find(|c| c.name == name)
    }
}

/// Generated samples plus the context records that describe them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub contexts: Vec<ContextRecord>,
    pub samples: Vec<SensorSegment>,
}

impl Dataset {
    pub fn context_record(&self, id: &str) -> Option<&ContextRecord> {
        self.contexts.iter().find(|c| c.context_id == id)
    }

    pub fn samples_in<'a>(&'a self, context: &'a str) -> impl Iterator<Item = &'a SensorSegment> + 'a {
        self.samples.iter().filter(move |s| s.context_id == context)
    }
}

/// Class prototypes: per class and channel, two `(frequency, phase, amplitude)` triples.
#[derive(Clone, Debug)]
struct Prototypes {
    waves: Vec<[(f64, f64, f64); 2]>,
}

fn prototypes(spec: &SyntheticSpec) -> Prototypes {
    let mut rng = RngState::new(spec.seed, streams::DATA).derive(0).rng();
    let k = spec.num_classes;
    let mut waves = Vec::with_capacity(k * spec.channels);
    for class in 0..k {
        // geometric ladder of class energies
        let level = if k > 1 {
            spec.class_energy_ratio.powf(class as f64 / (k - 1) as f64 - 0.5)
        } else {
            1.0
        };
        for _ in 0..spec.channels {
            let mut w = [(0.0, 0.0, 0.0); 2];
            for slot in w.iter_mut() {
                let freq = rng.random_range(2.0..16.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = level * rng.random_range(0.5..1.0);
                *slot = (freq, phase, amp);
            }
            waves.push(w);
        }
    }
    Prototypes { waves }
}

/// The skew-symmetric generator `A` with `||A||_F = sqrt(2) * max_angle`.
pub fn rotation_generator(spec: &SyntheticSpec) -> Vec<f64> {
    let c = spec.channels;
    let mut rng = RngState::new(spec.seed, streams::DATA).derive(1).rng();
    let b: Vec<f64> = (0..c * c).map(|_| rng.sample(StandardNormal)).collect();
    let mut a = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            a[i * c + j] = 0.5 * (b[i * c + j] - b[j * c + i]);
        }
    }
    let fro = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fro > 0.0 {
        let scale = std::f64::consts::SQRT_2 * spec.max_angle / fro;
        a.iter_mut().for_each(|v| *v *= scale);
    }
    a
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Matrix exponential by scaling and squaring with a Taylor series.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings as i32);
    let x: Vec<f64> = a.iter().map(|v| v * scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=20 {
        term = matmul_sq(&term, &x, n);
        term.iter_mut().for_each(|v| *v /= k as f64);
        result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
    }
    for _ in 0..squarings {
        result = matmul_sq(&result, &result, n);
    }
    result
}

/// Channel-mixing matrix for shift `s`: `exp(s * A)`.
pub fn mixing_matrix(spec: &SyntheticSpec, shift: f64) -> Vec<f64> {
    let a = rotation_generator(spec);
    let scaled: Vec<f64> = a.iter().map(|v| v * shift).collect();
    expm(&scaled, spec.channels)
}

/// Clean (pre-context) signal of one sample.
fn base_signal(spec: &SyntheticSpec, protos: &Prototypes, class: usize, sample_state: RngState) -> Vec<f64> {
    let (c, t) = (spec.channels, spec.length);
    let mut rng = sample_state.rng();
    let phase_shift = if spec.phase_jitter > 0.0 {
        rng.random_range(-spec.phase_jitter..spec.phase_jitter)
    } else {
        0.0
    };
    let amp_scale = 1.0 + spec.amp_jitter * rng.sample::<f64, _>(StandardNormal);
    let mut out = vec![0.0; c * t];
    for ch in 0..c {
        for &(freq, phase, amp) in &protos.waves[class * c + ch] {
            for ti in 0..t {
                let arg = 2.0 * PI * freq * ti as f64 / t as f64 + phase + phase_shift;
                out[ch * t + ti] += amp_scale * amp * arg.sin();
            }
        }
    }
    out
}

/// Generates `num_classes x contexts x samples_per_cell` labeled segments.
///
/// Sample order is context-major, then class, then repetition. Output is a pure
/// function of the spec.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_dataset_with(spec, Exec::available())
}

pub fn generate_dataset_with(spec: &SyntheticSpec, exec: Exec) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec);
    let generator = rotation_generator(spec);
    let (c, t) = (spec.channels, spec.length);
    let per_context = spec.num_classes * spec.samples_per_cell;
    let sample_root = RngState::new(spec.seed, streams::DATA).derive(2);
    let mixers: Vec<Vec<f64>> = spec
        .contexts
        .iter()
        .map(|ctx| {
            let scaled: Vec<f64> = generator.iter().map(|v| v * ctx.shift).collect();
            expm(&scaled, c)
        })
        .collect();
    let total = spec.contexts.len() * per_context;
    let samples = map_indexed(exec, total, |idx| {
        let ci = idx / per_context;
        let within = idx % per_context;
        let class = within / spec.samples_per_cell;
        let ctx = &spec.contexts[ci];
        // the clean signal depends on the class and repetition only, so every
        // context sees the same underlying activity instances
        let base = base_signal(spec, &protos, class, sample_root.derive(within as u64));
        let mixed = if ctx.shift == 0.0 {
            base
        } else {
            let m = &mixers[ci];
            let mut out = vec![0.0; c * t];
            for i in 0..c {
                for j in 0..c {
                    let w = m[i * c + j];
                    for ti in 0..t {
                        out[i * t + ti] += w * base[j * t + ti];
                    }
                }
            }
            out
        };
        let mut noise_rng = RngState::new(spec.seed, streams::DATA)
            .derive(3)
            .derive(idx as u64)
            .rng();
        let normal = Normal::new(0.0, ctx.noise.max(0.0)).expect("valid noise");
        let values: Vec<f32> = mixed
            .iter()
            .map(|&v| {
                let n = if ctx.noise > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
                (ctx.gain * v + n) as f32
            })
            .collect();
        SensorSegment::new(c, t, values, &ctx.name, Some(class)).expect("finite synthetic values")
    });
    let contexts = spec
        .contexts
        .iter()
        .map(|ctx| ContextRecord::new(&ctx.name, ctx.description(), spec.text_dim))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        contexts,
        samples,
    })
}

/// The clean signal of sample `index` within a context block (for tests and tools).
pub fn clean_signal(spec: &SyntheticSpec, class: usize, repetition: usize) -> Vec<f64> {
    let protos = prototypes(spec);
    let within = class * spec.samples_per_cell + repetition;
    let root = RngState::new(spec.seed, streams::DATA).derive(2);
    base_signal(spec, &protos, class, root.derive(within as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            channels: 3,
            length: 32,
            contexts: vec![
                ContextSpec::new("identity", 0.0, 1.0, 0.0),
                ContextSpec::new("far", 0.9, 1.0, 0.2),
            ],
            samples_per_cell: 4,
            ..SyntheticSpec::default_imu_like(seed)
        }
    }

    #[test]
    fn identity_context_reproduces_clean_signal() {
        let spec = tiny(3);
        let ds = generate_dataset(&spec).unwrap();
        for class in 0..3 {
            for rep in 0..4 {
                let s = &ds.samples[class * 4 + rep];
                let clean = clean_signal(&spec, class, rep);
                let expect: Vec<f32> = clean.iter().map(|v| *v as f32).collect();
                assert_eq!(s.values, expect);
                assert_eq!(s.label, Some(class));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_across_exec_modes() {
        let spec = tiny(5);
        let a = generate_dataset_with(&spec, Exec::Sequential).unwrap();
        let b = generate_dataset_with(&spec, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn record_count() {
        let spec = tiny(1);
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.samples.len(), 3 * 2 * 4);
    }

    #[test]
    fn mixing_is_orthogonal() {
        let spec = tiny(8);
        let m = mixing_matrix(&spec, 0.7);
        let c = spec.channels;
        for i in 0..c {
            for j in 0..c {
                let dot: f64 = (0..c).map(|k| m[k * c + i] * m[k * c + j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((dot - e).abs() < 1e-10);
            }
        }
        let id = mixing_matrix(&spec, 0.0);
        assert_eq!(id, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn invalid_spec_is_a_config_error() {
        let mut spec = tiny(1);
        spec.num_classes = 0;
        assert!(matches!(generate_dataset(&spec), Err(crate::Error::Config { .. })));
    }
}
