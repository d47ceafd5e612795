//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates to compare; all of them when the model is smaller.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor so that two near-zero gradients do not blow up
    /// the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            samples: 200,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter name, flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn eval<F>(loss_fn: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.check_finite()?;
    Ok(g.value(loss).item())
}

/// Compares the gradients `loss_fn` produces against central differences.
pub fn grad_check<F>(store: &ParamStore, loss_fn: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let first = eval(&loss_fn, store)?;
    let second = eval(&loss_fn, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward_into(loss, &mut analytic)?;

    let coords: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |i| (id, i)))
        .collect();
    let picked: Vec<usize> = if coords.len() <= cfg.samples {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut v = index::sample(&mut rng, coords.len(), cfg.samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &c in &picked {
        let (id, i) = coords[c];
        let orig = store.value(id).data()[i];
        probe.get_mut(id).value.data_mut()[i] = orig + cfg.eps;
        let plus = eval(&loss_fn, &probe)?;
        probe.get_mut(id).value.data_mut()[i] = orig - cfg.eps;
        let minus = eval(&loss_fn, &probe)?;
        probe.get_mut(id).value.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let a = analytic.get(id).grad.data()[i];
        let denom = a.abs().max(numeric.abs()).max(cfg.floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.get(id).name.clone(), i, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use rand::Rng;

    fn random_store(n: usize, seed: u64) -> (ParamStore, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::new(vec![n], data).unwrap()).unwrap();
        (store, id)
    }

    #[test]
    fn exact_quadratic() {
        let (store, id) = random_store(300, 1);
        let report = grad_check(
            &store,
            |g, s| {
                let t = g.param(s, id);
                let sq = g.mul(t, t);
                Ok(g.sum(sq))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 200);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn doubled_gradient_is_reported() {
        let (store, id) = random_store(50, 2);
        let report = grad_check(
            &store,
            |g, s| {
                let t = g.param(s, id);
                let sq = g.map(t, |v| v * v, |v| 4.0 * v);
                Ok(g.sum(sq))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!((report.max_rel_error - 0.5).abs() < 1e-6, "{report:?}");
    }

    #[test]
    fn nondeterminism_is_an_error() {
        use std::cell::Cell;
        let (store, id) = random_store(4, 3);
        let calls = Cell::new(0.0);
        let err = grad_check(
            &store,
            |g, s| {
                calls.set(calls.get() + 1.0);
                let t = g.param(s, id);
                let shifted = g.map(t, |v| v + calls.get(), |_| 1.0);
                Ok(g.sum(shifted))
            },
            GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
