//! Central finite-difference checks for the autodiff tape (64-bit only).

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.coordinates += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(rel);
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.coordinates += other.coordinates;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

fn scalar_value(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::contract("gradient check needs a scalar output"));
    }
    Ok(t.item())
}

/// Checks gradients with respect to free leaf tensors. `build` receives one
/// leaf per input and must return a scalar.
pub fn check_leaves<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        scalar_value(&g, out)
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(analytic[i].data()[j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks gradients with respect to the parameters in `store`, sampling at
/// most `per_tensor` coordinates from each parameter tensor.
pub fn check_params<F, R>(
    store: &mut ParamStore<f64>,
    step: f64,
    per_tensor: usize,
    rng: &mut R,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    check_owned_params(store, |s| s, step, per_tensor, rng, build)
}

/// Like [`check_params`] for a store owned by `owner` (a model whose
/// forward pass reads its own store).
pub fn check_owned_params<M, S, F, R>(
    owner: &mut M,
    store_of: S,
    step: f64,
    per_tensor: usize,
    rng: &mut R,
    build: F,
) -> Result<GradCheckReport>
where
    S: Fn(&mut M) -> &mut ParamStore<f64>,
    F: Fn(&mut Graph<f64>, &M) -> Result<Var>,
    R: Rng + ?Sized,
{
    store_of(owner).zero_grad();
    let mut g = Graph::new();
    let out = build(&mut g, owner)?;
    g.backward(out)?;
    g.accumulate_param_grads(store_of(owner));

    let eval = |owner: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, owner)?;
        scalar_value(&g, out)
    };
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store_of(owner).iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store_of(owner).value(id).len();
        let picks = sample(rng, n, per_tensor.min(n));
        for j in picks.iter() {
            let analytic = store_of(owner).grad(id).data()[j];
            let orig = store_of(owner).value(id).data()[j];
            store_of(owner).value_mut(id).data_mut()[j] = orig + step;
            let plus = eval(owner)?;
            store_of(owner).value_mut(id).data_mut()[j] = orig - step;
            let minus = eval(owner)?;
            store_of(owner).value_mut(id).data_mut()[j] = orig;
            report.record(analytic, (plus - minus) / (2.0 * step));
        }
    }
    store_of(owner).zero_grad();
    Ok(report)
}
