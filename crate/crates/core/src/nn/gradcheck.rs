//! Finite-difference verification of reverse-mode gradients.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Something with trainable parameters and a scalar loss.
pub trait GradTarget {
    fn stores(&mut self) -> Vec<&mut ParamStore<f64>>;
    fn loss(&self, g: &mut Graph<f64>) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Step is `rel_step * max(1, |theta|)`.
    pub rel_step: f64,
    /// Coordinates probed per parameter tensor; smaller tensors are probed fully.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. Only useful for
    /// checking that the checker itself catches wrong gradients.
    pub corrupt_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-5,
            coords_per_param: 12,
            seed: 0,
            corrupt_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: Option<String>,
    pub coords_checked: usize,
}

const DENOM_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences and returns the
/// largest `|analytic - numeric| / max(|numeric|, 1e-6 * max(1, |loss|))`
/// over the probed coordinates.
///
/// The floor grows with the loss because the rounding noise of a central
/// difference is about `eps * |loss| / h`; below it a coordinate's gradient
/// cannot be resolved at all.
pub fn grad_check<G: GradTarget>(target: &mut G, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut g = Graph::new().with_finite_checks(false);
    let root = target.loss(&mut g)?;
    let grads = g.backward(root)?;
    let floor = DENOM_FLOOR * g.value(root).item().abs().max(1.0);
    let mut analytic: HashMap<(u64, usize), Vec<f64>> = HashMap::new();
    for (tag, id, t) in grads.params() {
        let entry = analytic.entry((tag, id.0)).or_insert_with(|| vec![0.0; t.len()]);
        for (a, v) in entry.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n_stores = target.stores().len();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for s in 0..n_stores {
        let (tag, shapes): (u64, Vec<(String, usize)>) = {
            let stores = target.stores();
            let store = &stores[s];
            (
                store.tag(),
                store.iter().map(|(_, p)| (p.name.clone(), p.value.len())).collect(),
            )
        };
        for (pi, (name, len)) in shapes.iter().enumerate() {
            let coords: Vec<usize> = if *len <= opts.coords_per_param {
                (0..*len).collect()
            } else {
                let mut c = sample(&mut rng, *len, opts.coords_per_param).into_vec();
                c.sort_unstable();
                c
            };
            for i in coords {
                let numeric = central_difference(target, s, pi, i, opts.rel_step)?;
                let a = analytic.get(&(tag, pi)).map_or(0.0, |v| v[i]) * opts.corrupt_scale;
                let err = (a - numeric).abs() / numeric.abs().max(floor);
                report.coords_checked += 1;
                // NaN compares false, so force it through explicitly.
                if err > report.max_rel_error || err.is_nan() || report.worst.is_none() {
                    report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                    report.worst = Some(format!("{name}[{i}]"));
                }
            }
        }
    }
    Ok(report)
}

fn central_difference<G: GradTarget>(
    target: &mut G,
    store: usize,
    param: usize,
    i: usize,
    rel_step: f64,
) -> Result<f64> {
    let theta = target.stores()[store].get(super::ParamId(param)).value.data()[i];
    let h = rel_step * theta.abs().max(1.0);
    let eval = |v: f64, target: &mut G| -> Result<f64> {
        target.stores()[store].get_mut(super::ParamId(param)).value.data_mut()[i] = v;
        let mut g = Graph::new().with_finite_checks(false);
        let root = target.loss(&mut g)?;
        Ok(g.value(root).item())
    };
    let plus = eval(theta + h, target)?;
    let minus = eval(theta - h, target)?;
    eval(theta, target)?;
    Ok((plus - minus) / (2.0 * h))
}

struct FnTarget<'a, F> {
    store: &'a mut ParamStore<f64>,
    f: F,
}

impl<F> GradTarget for FnTarget<'_, F>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    fn stores(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![&mut *self.store]
    }

    fn loss(&self, g: &mut Graph<f64>) -> Result<Var> {
        (self.f)(g, self.store)
    }
}

/// [`grad_check`] for a loss written as a closure over one parameter store.
pub fn grad_check_fn<F>(store: &mut ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check(&mut FnTarget { store, f }, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn linear_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add(
            "x",
            Tensor::from_f64(
                &[3, 4],
                &[0.3, -1.2, 0.5, 2.0, 1.1, 0.4, -0.7, 0.9, -0.2, 0.8, 1.5, -1.0],
            ),
        );
        s.add(
            "w",
            Tensor::from_f64(&[2, 4], &[0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8]),
        );
        s.add("b", Tensor::from_f64(&[2], &[0.05, -0.1]));
        s
    }

    fn linear_loss(g: &mut Graph<f64>, s: &ParamStore<f64>) -> Result<Var> {
        let x = g.param(s, s.find("x").unwrap());
        let w = g.param(s, s.find("w").unwrap());
        let b = g.param(s, s.find("b").unwrap());
        let y = g.matmul(x, w, true)?;
        let y = g.add_row_bias(y, b)?;
        let y = g.square(y);
        Ok(g.sum(y))
    }

    #[test]
    fn linear_layer_passes() {
        let mut s = linear_store();
        let r = grad_check_fn(&mut s, linear_loss, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coords_checked, 12 + 8 + 2);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut s = linear_store();
        let opts = GradCheckOptions {
            corrupt_scale: 2.0,
            ..Default::default()
        };
        let r = grad_check_fn(&mut s, linear_loss, &opts).unwrap();
        assert!((r.max_rel_error - 1.0).abs() < 1e-3, "{r:?}");
    }

    #[test]
    fn check_leaves_parameters_untouched() {
        let mut s = linear_store();
        let before = s.clone();
        grad_check_fn(&mut s, linear_loss, &GradCheckOptions::default()).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(before.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
