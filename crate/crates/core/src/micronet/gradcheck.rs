//! Central finite-difference gradient checking.

use super::network::Network;
use super::tensor::Tensor;
use super::Parameterized;
use crate::error::Result;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator, so parameters whose true gradient
/// is zero are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximised over all entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `loss` with respect to every parameter of
/// `model`, in [`Parameterized`] order. Parameters are restored exactly.
pub fn numeric_gradient<M, F>(model: &mut M, h: f64, mut loss: F) -> Result<Vec<f64>>
where
    M: Parameterized,
    F: FnMut(&M) -> Result<f64>,
{
    let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for (slot, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let original = model.params()[slot].1[i];
            model.params_mut()[slot].1[i] = original + h;
            let up = loss(model)?;
            model.params_mut()[slot].1[i] = original - h;
            let down = loss(model)?;
            model.params_mut()[slot].1[i] = original;
            out.push((up - down) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Compares backpropagated gradients of `net` against central differences.
///
/// `loss` maps the network output to a scalar and its gradient with respect
/// to that output. Returns the maximum relative error over all parameters.
pub fn grad_check<L>(net: &Network, input: &Tensor, loss: L) -> Result<f64>
where
    L: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (out, cache) = net.forward(input)?;
    let (_, dout) = loss(&out)?;
    let (grads, _) = net.backward(&cache, &dout)?;
    let analytic = grads.flatten();
    let mut probe = net.clone();
    let numeric = numeric_gradient(&mut probe, FD_STEP, |m: &Network| {
        Ok(loss(&m.predict(input)?)?.0)
    })?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Input-gradient check: compares `dL/d(input)` from backward against central
/// differences over the input entries.
pub fn input_grad_check<L>(net: &Network, input: &Tensor, loss: L) -> Result<f64>
where
    L: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (out, cache) = net.forward(input)?;
    let (_, dout) = loss(&out)?;
    let (_, dx) = net.backward(&cache, &dout)?;
    let mut numeric = Vec::with_capacity(input.len());
    let mut probe = input.clone();
    for i in 0..input.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + FD_STEP;
        let up = loss(&net.predict(&probe)?)?.0;
        probe.data_mut()[i] = original - FD_STEP;
        let down = loss(&net.predict(&probe)?)?.0;
        probe.data_mut()[i] = original;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(max_relative_error(dx.data(), &numeric))
}
