//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Scalars checked per parameter; larger tensors are subsampled.
    pub max_samples: usize,
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_samples: 64,
            seed: 0,
            abs_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub step: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params
            .iter()
            .filter(move |p| !(p.max_rel_err < self.tol))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.value(out)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(g.shape(out).to_vec()))
}

/// Compare analytic gradients of the scalar `f` against central differences
/// for every parameter `f` brings onto its tape.
pub fn grad_check<F>(f: F, store: &ParamStore, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let touched = g.param_ids();
    let grads = g.backward(out)?.into_params();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut params = Vec::with_capacity(touched.len());
    for id in touched {
        let p = store.get(id);
        let n = p.value.numel();
        let picks: Vec<usize> = if n <= opts.max_samples {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_samples).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = ParamCheck {
            name: p.name.clone(),
            checked: picks.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in picks {
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
            let numeric = central_difference(&f, &mut probe, id, i, opts.step)?;
            if !analytic.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}[{i}]", p.name)));
            }
            check.max_abs_err = check.max_abs_err.max((analytic - numeric).abs());
            check.max_rel_err =
                check
                    .max_rel_err
                    .max(relative_error(analytic, numeric, opts.abs_floor));
        }
        params.push(check);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        passed: max_rel_err < opts.tol,
        params,
        tol: opts.tol,
        step: opts.step,
        max_rel_err,
    })
}

fn central_difference<F>(
    f: &F,
    probe: &mut ParamStore,
    id: ParamId,
    i: usize,
    step: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let orig = probe.value(id).data()[i];
    probe.get_mut(id).value.data_mut()[i] = orig + step;
    let plus = eval(f, probe);
    probe.get_mut(id).value.data_mut()[i] = orig - step;
    let minus = eval(f, probe);
    probe.get_mut(id).value.data_mut()[i] = orig;
    Ok((plus? - minus?) / (2.0 * step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_function_has_zero_error() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let report = grad_check(
            |g, s| {
                let x = g.param(s, ParamId(0));
                Ok(g.sum(x))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn three_layer_mlp_is_tight() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let dims = [5, 7, 6, 3];
        let layers: Vec<(ParamId, ParamId)> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.add_uniform(format!("w{i}"), &[w[0], w[1]], 0.5, &mut rng),
                    store.add_uniform(format!("b{i}"), &[w[1]], 0.5, &mut rng),
                )
            })
            .collect();
        let x = Tensor::from_fn(&[2, 5], |_| rng.random_range(-1.0..1.0));
        let report = grad_check(
            |g, s| {
                let mut h = g.constant(x.clone());
                for (i, (w, b)) in layers.iter().enumerate() {
                    let wv = g.param(s, *w);
                    let bv = g.param(s, *b);
                    h = g.matmul(h, wv)?;
                    h = g.add_row(h, bv)?;
                    if i + 1 < layers.len() {
                        h = g.gelu(h);
                    }
                }
                let sq = g.mul(h, h)?;
                Ok(g.sum(sq))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
        assert_eq!(report.params.len(), 6);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let mut store = ParamStore::new();
        store.add(
            "x",
            Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 2.0]).unwrap(),
        );
        let report = grad_check(
            |g, s| {
                let x = g.param(s, ParamId(0));
                let v = g.value(x).clone();
                let sq = Tensor::from_fn(v.shape(), |i| v.data()[i] * v.data()[i]);
                // d(x^2)/dx is 2x; the rule below reports x
                let y = g.custom(
                    &[x],
                    sq,
                    Box::new(|ins, _out, gy| {
                        let x = ins[0];
                        vec![Tensor::from_fn(x.shape(), |i| gy.data()[i] * x.data()[i])]
                    }),
                );
                Ok(g.sum(y))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.failing().count(), 1);
    }

    #[test]
    fn non_finite_is_reported_with_name() {
        let mut store = ParamStore::new();
        store.add("bad", Tensor::new(vec![1], vec![0.0]).unwrap());
        let err = grad_check(
            |g, s| {
                let x = g.param(s, ParamId(0));
                let one = g.constant(Tensor::scalar(1.0));
                let z = g.constant(Tensor::scalar(0.0));
                let y = g.mul(x, one)?;
                let q = g.div(y, z)?;
                Ok(g.sum(q))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
    }
}
