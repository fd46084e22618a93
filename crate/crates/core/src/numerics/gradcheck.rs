use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::optim::{ParamId, ParamStore};
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates left out because `x - h` or `x + h` falls on another side
    /// of a ReLU or clamp kink than `x`, where a difference quotient says
    /// nothing about the derivative at `x`.
    pub skipped: usize,
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` must construct the loss from the parameters in `store`. Every scalar is
/// checked unless `max_per_param` is set, in which case that many coordinates per
/// tensor are drawn with `rng`. The relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`. Coordinates whose stencil crosses a
/// kink are counted in `skipped` instead of compared.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    h: f64,
    max_per_param: Option<usize>,
    rng: RngState,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    assert!(h > 0.0 && h <= 1e-1, "step must lie in (0, 0.1]");
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let analytic = g.backward(loss)?.for_store(store);

    let pattern = g.kink_pattern();

    let eval = |s: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        Ok((g.scalar(l), g.kink_pattern() == pattern))
    };

    let mut draw = rng.rng();
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match max_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut draw, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let base = store.get(id).data()[j];
            set(&mut work, id, j, base + h);
            let (fp, same_p) = eval(&work)?;
            set(&mut work, id, j, base - h);
            let (fm, same_m) = eval(&work)?;
            set(&mut work, id, j, base);
            if !(same_p && same_m) {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[id.0].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}

fn set(store: &mut ParamStore<f64>, id: ParamId, j: usize, v: f64) {
    store.get_mut(id).data_mut()[j] = v;
}

/// Builds a one-parameter store, handy for checking gradients w.r.t. inputs.
pub fn single_param_store(name: &str, t: Tensor<f64>) -> (ParamStore<f64>, ParamId) {
    let mut s = ParamStore::new();
    let id = s.insert(name, t);
    (s, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::streams;

    #[test]
    fn linear_graph_is_exact() {
        let (s, id) = single_param_store("p", Tensor::from_vec(&[4], vec![0.1, 0.2, -0.3, 2.0]));
        let r = grad_check(&s, 1e-3, None, RngState::new(0, streams::INIT), |g, s| {
            let p = g.param(s, id);
            let q = g.scale(p, 3.0);
            Ok(g.sum_all(q))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn relu_near_its_kink_is_skipped_not_compared() {
        let (s, id) = single_param_store("p", Tensor::from_vec(&[3], vec![2e-4, 0.5, -0.5]));
        let r = grad_check(&s, 1e-3, None, RngState::new(0, streams::INIT), |g, s| {
            let p = g.param(s, id);
            let q = g.relu(p);
            Ok(g.sum_all(q))
        })
        .unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // The first build feeds the analytic pass; later builds disagree with it.
        let calls = std::cell::Cell::new(0);
        let (s, id) = single_param_store("p", Tensor::from_vec(&[2], vec![0.3, 0.7]));
        let r = grad_check(&s, 1e-3, None, RngState::new(0, streams::INIT), |g, s| {
            calls.set(calls.get() + 1);
            let p = g.param(s, id);
            let q = g.scale(p, if calls.get() == 1 { 3.0 } else { 2.0 });
            Ok(g.sum_all(q))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.3, "{r:?}");
        assert_eq!(r.skipped, 0);
    }
}
