use super::{Network, Params, Result, Tensor};
use crate::data::{ClassLabel, ClassWeights};
use crate::parallel::Exec;

/// Largest number of parameters probed by [`grad_check`]; bigger models are
/// probed on an evenly strided subset.
pub const MAX_PROBES: usize = 4096;

/// Gradients smaller than this are compared absolutely rather than
/// relatively. At `h = 1e-6` central differences in `f64` carry up to about
/// `1e-9` of rounding noise, so below this scale a relative comparison would
/// measure the noise, not the gradient.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probe_indices(n: usize) -> Vec<usize> {
    if n <= MAX_PROBES {
        (0..n).collect()
    } else {
        (0..MAX_PROBES).map(|k| k * n / MAX_PROBES).collect()
    }
}

/// Max relative error between `analytic` and central differences
/// `(L(θ + h e_i) - L(θ - h e_i)) / 2h` over the probed parameters.
pub fn compare_gradients(
    net: &Network,
    params: &Params,
    batch: &Tensor,
    labels: &[ClassLabel],
    weights: &ClassWeights,
    h: f64,
    analytic: &Params,
) -> Result<f64> {
    let idx = probe_indices(params.len());
    let errs = Exec::Parallel.try_map_slice(&idx, |&i| -> Result<f64> {
        let mut p = params.clone();
        p.values[i] = params.values[i] + h;
        let up = net.loss(&p, batch, labels, weights)?;
        p.values[i] = params.values[i] - h;
        let down = net.loss(&p, batch, labels, weights)?;
        Ok(relative_error(analytic.values[i], (up - down) / (2.0 * h)))
    })?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Checks [`Network::loss_and_grad`] against central differences.
pub fn grad_check(
    net: &Network,
    params: &Params,
    batch: &Tensor,
    labels: &[ClassLabel],
    weights: &ClassWeights,
    h: f64,
) -> Result<f64> {
    let (_, analytic) = net.loss_and_grad(params, batch, labels, weights, Exec::Sequential)?;
    compare_gradients(net, params, batch, labels, weights, h, &analytic)
}
