//! Deterministic text featurizer for context descriptions.
//!
//! Descriptions are lowercased, whitespace runs collapse to one space, and the
//! result is padded with one space on each side. Every character trigram is hashed
//! with 64-bit FNV-1a; the bucket is `hash mod dim` and the sign comes from bit 63.
//! The accumulated vector is L2-normalized.

use serde::{Deserialize, Serialize};

pub const DEFAULT_TEXT_DIM: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercase, trim, and collapse whitespace runs.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Padded character trigrams of the normalized text.
pub fn trigrams(text: &str) -> Vec<String> {
    let norm = normalize_text(text);
    if norm.is_empty() {
        return Vec::new();
    }
    let padded: Vec<char> = std::iter::once(' ')
        .chain(norm.chars())
        .chain(std::iter::once(' '))
        .collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

/// Hashed, signed, L2-normalized trigram features.
///
/// Returns the vector and whether it was normalized (false only for text with no
/// trigrams, which yields the zero vector).
pub fn featurize_text_with_flag(text: &str, dim: usize) -> (Vec<f32>, bool) {
    assert!(dim > 0, "feature dimension must be positive");
    let mut acc = vec![0.0f64; dim];
    for tri in trigrams(text) {
        let h = fnv1a64(tri.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        acc[bucket] += sign;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (vec![0.0; dim], false);
    }
    (acc.iter().map(|v| (v / norm) as f32).collect(), true)
}

pub fn featurize_text(text: &str, dim: usize) -> Vec<f32> {
    featurize_text_with_flag(text, dim).0
}

/// A context identifier with its description and featurized vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub context_id: String,
    pub description: String,
    pub features: Vec<f32>,
    pub normalized: bool,
}

impl ContextRecord {
    pub fn new(context_id: &str, description: &str, dim: usize) -> Self {
        let (features, normalized) = featurize_text_with_flag(description, dim);
        Self {
            context_id: context_id.to_string(),
            description: description.to_string(),
            features,
            normalized,
        }
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
