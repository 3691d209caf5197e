//! Central finite-difference verification of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Which coordinates of each tensor to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `n` coordinates per tensor, drawn without replacement.
    Sample {
        n: usize,
        seed: u64,
    },
}

impl Coords {
    fn pick(&self, len: usize, salt: u64) -> Vec<usize> {
        match *self {
            Coords::Sample { n, seed } if n < len => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, len, n).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        }
    }
}

fn scalar_value<'g>(
    f: &impl Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    g: &'g Graph,
    inputs: &[Tensor],
) -> Result<f64> {
    let vars: Vec<Var<'g>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    Ok(f(g, &vars)?.item())
}

/// Max relative error of `∂f/∂x` over all coordinates of `x`.
pub fn grad_check(
    f: impl for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
    x: &Tensor,
    step: f64,
) -> Result<f64> {
    let errs = grad_check_inputs(
        higher_ranked(|g, xs| f(g, xs[0])),
        std::slice::from_ref(x),
        step,
        Coords::All,
    )?;
    Ok(errs[0])
}

fn higher_ranked<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    f
}

/// Per-input max relative error for a scalar function of several tensors.
///
/// Detached values are frozen at their unperturbed values during the
/// finite-difference passes, so the numeric side differentiates the same
/// function that backward does.
pub fn grad_check_inputs(
    f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
    inputs: &[Tensor],
    step: f64,
    coords: Coords,
) -> Result<Vec<f64>> {
    let (analytic, detached): (Vec<Tensor>, _) = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars)?;
        g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros_like(t)))
            .collect();
        (grads, g.detached_values())
    };
    let replay = || Graph::with_frozen_detached(detached.clone());

    let mut out = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in coords.pick(input.len(), k as u64) {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + step;
            let plus = scalar_value(&f, &replay(), &probe)?;
            probe[k].data_mut()[i] = orig - step;
            let minus = scalar_value(&f, &replay(), &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
        out.push(worst);
    }
    Ok(out)
}

/// Per-parameter max relative error of a module loss. Parameters are
/// perturbed in place and restored; detached values are frozen as in
/// [`grad_check_inputs`].
pub fn grad_check_module<M: Module>(
    module: &mut M,
    loss: impl for<'g> Fn(&'g Graph, &M) -> Result<Var<'g>>,
    step: f64,
    coords: Coords,
) -> Result<Vec<(String, f64)>> {
    let mut analytic = Vec::new();
    let detached = {
        let g = Graph::new();
        let l = loss(&g, module)?;
        g.backward(l)?;
        module.visit_params("", &mut |name, p| {
            let grad = g
                .param_grad(p.id())
                .unwrap_or_else(|| Tensor::zeros_like(p.value()));
            analytic.push((name, grad));
        });
        g.detached_values()
    };

    let mut report = Vec::with_capacity(analytic.len());
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in coords.pick(grad.len(), k as u64) {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut orig = 0.0;
                module.visit_params_mut("", &mut |n, p| {
                    if &n == name {
                        orig = p.value().data()[i];
                        p.value_mut().data_mut()[i] = orig + delta;
                    }
                });
                let g = Graph::with_frozen_detached(detached.clone());
                let v = loss(&g, module).map(|l| l.item());
                module.visit_params_mut("", &mut |n, p| {
                    if &n == name {
                        p.value_mut().data_mut()[i] = orig;
                    }
                });
                v
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        report.push((name.clone(), worst));
    }
    Ok(report)
}
