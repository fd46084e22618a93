//! Gaussian-kernel MMD and the median bandwidth heuristic.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::RngState;
use crate::parallel::{map_indexed, Exec};

/// Bandwidth floor used when every pairwise distance is zero.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Above this many pooled points the heuristic uses a seeded subsample.
pub const MEDIAN_MAX_POINTS: usize = 2000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdKind {
    #[default]
    Biased,
    Unbiased,
}

impl std::str::FromStr for MmdKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "biased" => Ok(Self::Biased),
            "unbiased" => Ok(Self::Unbiased),
            other => Err(crate::error::config("shift.estimator", format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdValue {
    pub mmd2: f64,
    /// `sqrt(max(mmd2, 0))`.
    pub mmd: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp()
}

/// Median pairwise Euclidean distance of the pooled points.
pub fn median_heuristic(points: &[&[f64]], rng: RngState) -> Result<f64> {
    if points.len() < 2 {
        return Err(contract("median heuristic needs at least two points"));
    }
    let chosen: Vec<&[f64]> = if points.len() > MEDIAN_MAX_POINTS {
        let mut r = rng.rng();
        let mut idx = sample(&mut r, points.len(), MEDIAN_MAX_POINTS).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| points[i]).collect()
    } else {
        points.to_vec()
    };
    let n = chosen.len();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(chosen[i], chosen[j]).sqrt());
        }
    }
    let m = d.len();
    let mid = m / 2;
    let (_, upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if m % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    Ok(if median > SIGMA_FLOOR { median } else { SIGMA_FLOOR })
}

/// Sum of `k(a_i, b_j)`; with `skip_diag` the `i == j` terms are left out.
/// Rows are summed independently and combined in index order, so the result
/// does not depend on how rows are scheduled.
fn kernel_sum(exec: Exec, a: &[&[f64]], b: &[&[f64]], sigma: f64, skip_diag: bool) -> f64 {
    let rows = map_indexed(exec, a.len(), |i| {
        let mut acc = 0.0;
        for (j, bj) in b.iter().enumerate() {
            if skip_diag && i == j {
                continue;
            }
            acc += gaussian_kernel(a[i], bj, sigma);
        }
        acc
    });
    rows.iter().sum()
}

pub fn mmd(x: &[&[f64]], y: &[&[f64]], sigma: f64, kind: MmdKind) -> Result<MmdValue> {
    mmd_with(Exec::available(), x, y, sigma, kind)
}

pub fn mmd_with(exec: Exec, x: &[&[f64]], y: &[&[f64]], sigma: f64, kind: MmdKind) -> Result<MmdValue> {
    let min = match kind {
        MmdKind::Biased => 1,
        MmdKind::Unbiased => 2,
    };
    if x.len() < min || y.len() < min {
        return Err(contract(format!(
            "{kind:?} MMD needs at least {min} points per set, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(contract(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    if let Some(d) = x.first().map(|p| p.len()) {
        if x.iter().chain(y).any(|p| p.len() != d) {
            return Err(contract("points have inconsistent dimensions"));
        }
    }
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mmd2 = match kind {
        MmdKind::Biased => {
            kernel_sum(exec, x, x, sigma, false) / (m * m) + kernel_sum(exec, y, y, sigma, false) / (n * n)
                - 2.0 * kernel_sum(exec, x, y, sigma, false) / (m * n)
        }
        MmdKind::Unbiased => {
            kernel_sum(exec, x, x, sigma, true) / (m * (m - 1.0))
                + kernel_sum(exec, y, y, sigma, true) / (n * (n - 1.0))
                - 2.0 * kernel_sum(exec, x, y, sigma, false) / (m * n)
        }
    };
    Ok(MmdValue {
        mmd2,
        mmd: mmd2.max(0.0).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::streams;
    use rand::Rng;

    fn rs() -> RngState {
        RngState::new(0, streams::SUBSAMPLE)
    }

    #[test]
    fn median_examples() {
        let pts = [vec![0.0], vec![2.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert_eq!(median_heuristic(&refs, rs()).unwrap(), 2.0);

        let pts = [vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert_eq!(median_heuristic(&refs, rs()).unwrap(), 1.5);

        let pts = vec![vec![4.0, 4.0]; 5];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        assert_eq!(median_heuristic(&refs, rs()).unwrap(), SIGMA_FLOOR);
    }

    #[test]
    fn median_needs_two_points() {
        let p = [0.0];
        assert!(median_heuristic(&[&p[..]], rs()).is_err());
    }

    #[test]
    fn identical_sets_have_zero_biased_mmd() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let v = mmd(&refs, &refs, 1.3, MmdKind::Biased).unwrap();
        assert_eq!(v.mmd, 0.0);
    }

    #[test]
    fn singleton_closed_form() {
        let x = [0.0, 1.0];
        let y = [2.0, -1.0];
        let sigma = 1.7;
        let v = mmd(&[&x[..]], &[&y[..]], sigma, MmdKind::Biased).unwrap();
        let d2 = 8.0;
        let expect = 2.0 * (1.0 - (-d2 / (2.0 * sigma * sigma)).exp());
        assert!((v.mmd2 - expect).abs() < 1e-15);
    }

    fn oracle(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64, unbiased: bool) -> f64 {
        let k = |a: &Vec<f64>, b: &Vec<f64>| {
            let mut s = 0.0;
            for t in 0..a.len() {
                s += (a[t] - b[t]).powi(2);
            }
            (-s / (2.0 * sigma * sigma)).exp()
        };
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        let (mut cxx, mut cyy) = (0.0, 0.0);
        for i in 0..x.len() {
            for j in 0..x.len() {
                if unbiased && i == j {
                    continue;
                }
                xx += k(&x[i], &x[j]);
                cxx += 1.0;
            }
        }
        for i in 0..y.len() {
            for j in 0..y.len() {
                if unbiased && i == j {
                    continue;
                }
                yy += k(&y[i], &y[j]);
                cyy += 1.0;
            }
        }
        for a in x {
            for b in y {
                xy += k(a, b);
            }
        }
        xx / cxx + yy / cyy - 2.0 * xy / (x.len() * y.len()) as f64
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut r = RngState::new(11, streams::DATA).rng();
        for _ in 0..5 {
            let x: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| r.random_range(-0.5..1.5)).collect()).collect();
            let xr: Vec<&[f64]> = x.iter().map(|p| p.as_slice()).collect();
            let yr: Vec<&[f64]> = y.iter().map(|p| p.as_slice()).collect();
            for (kind, unb) in [(MmdKind::Biased, false), (MmdKind::Unbiased, true)] {
                let got = mmd(&xr, &yr, 0.8, kind).unwrap().mmd2;
                assert!((got - oracle(&x, &y, 0.8, unb)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn size_violations() {
        let p = [0.0];
        assert!(mmd(&[], &[&p[..]], 1.0, MmdKind::Biased).is_err());
        assert!(mmd(&[&p[..]], &[&p[..], &p[..]], 1.0, MmdKind::Unbiased).is_err());
        assert!(mmd(&[&p[..]], &[&p[..]], 0.0, MmdKind::Biased).is_err());
    }

    #[test]
    fn kernel_range() {
        let a = [1.0, 2.0];
        assert_eq!(gaussian_kernel(&a, &a, 0.5), 1.0);
        let b = [30.0, 2.0];
        let k = gaussian_kernel(&a, &b, 100.0);
        assert!(k > 0.0 && k < 1.0);
    }

    #[test]
    fn exec_modes_agree_bitwise() {
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let a = mmd_with(Exec::Sequential, &refs[..20], &refs[20..], 0.7, MmdKind::Biased).unwrap();
        let b = mmd_with(Exec::Parallel, &refs[..20], &refs[20..], 0.7, MmdKind::Biased).unwrap();
        assert_eq!(a, b);
    }
}
