//! Finite-difference verification of recorded gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries probed per parameter; larger tensors are sampled (seeded).
    pub max_entries_per_path: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_entries_per_path: 64,
        }
    }
}

/// Worst relative error `|g − ĝ| / max(1, |g|, |ĝ|)` per parameter path.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub per_path: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_path.values().cloned().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_path
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    g.scalar(root)
}

/// Reverse-mode gradients of the scalar built by `f`, per path.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<BTreeMap<String, Matrix>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let root = f(&mut g, &work)?;
    if g.shape(root) != (1, 1) {
        return Err(Error::Contract("gradient check needs a scalar loss".into()));
    }
    g.backward(root, &mut work)?;
    Ok(work.iter().map(|(k, p)| (k.to_string(), p.grad.clone())).collect())
}

/// Compares supplied gradients against central differences of `f`.
pub fn compare_with_finite_differences<F>(
    store: &ParamStore,
    analytic: &BTreeMap<String, Matrix>,
    seed: u64,
    opts: GradCheckOptions,
    f: &F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let paths: Vec<String> = store.paths().map(str::to_string).collect();
    for path in paths {
        let grad = analytic.get(&path).ok_or_else(|| Error::Lookup(path.clone()))?;
        let n = grad.len();
        let entries: Vec<usize> = if n <= opts.max_entries_per_path {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_entries_per_path).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for i in entries {
            let orig = work.get(&path)?.data()[i];
            work.get_mut(&path)?.data_mut()[i] = orig + opts.step;
            let up = eval_loss(&work, f)?;
            work.get_mut(&path)?.data_mut()[i] = orig - opts.step;
            let down = eval_loss(&work, f)?;
            work.get_mut(&path)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let g = grad.data()[i];
            let err = (g - numeric).abs() / 1f64.max(g.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        report.per_path.insert(path, worst);
    }
    Ok(report)
}

/// Reverse-mode gradients of `f` checked against central differences.
pub fn grad_check<F>(store: &ParamStore, seed: u64, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let analytic = analytic_gradients(store, &f)?;
    compare_with_finite_differences(store, &analytic, seed, opts, &f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::layers::linear_forward;

    fn quad_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "lin.w",
            Matrix::from_rows(&[[0.3, -0.2], [0.8, 0.1], [-0.5, 0.4]]).unwrap(),
        )
        .unwrap();
        s.insert("lin.b", Matrix::row_vector(&[0.05, -0.1])).unwrap();
        s
    }

    fn quad_loss(g: &mut Graph, s: &ParamStore) -> Result<NodeId> {
        let x = g.constant(Matrix::from_rows(&[[1.0, 2.0, -1.0], [0.5, -0.3, 2.0]]).unwrap());
        let y = linear_forward(g, x, "lin", s)?;
        let sq = g.group_scores(y, y, 1, 1, 1.0)?;
        Ok(g.sum(sq))
    }

    #[test]
    fn quadratic_linear_layer() {
        let r = grad_check(&quad_store(), 0, GradCheckOptions::default(), quad_loss).unwrap();
        assert!(r.max_error() < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_injected_fault() {
        let s = quad_store();
        let mut grads = analytic_gradients(&s, &quad_loss).unwrap();
        grads.get_mut("lin.w").unwrap().data_mut()[2] += 1.0;
        let r = compare_with_finite_differences(&s, &grads, 0, GradCheckOptions::default(), &quad_loss).unwrap();
        assert!(r.per_path["lin.w"] > 1e-2);
        assert!(r.per_path["lin.b"] < 1e-6);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let s = quad_store();
        let f = |g: &mut Graph, s: &ParamStore| {
            let x = g.constant(Matrix::zeros(1, 3));
            linear_forward(g, x, "lin", s)
        };
        assert!(matches!(
            grad_check(&s, 0, GradCheckOptions::default(), f),
            Err(Error::Contract(_))
        ));
    }
}
