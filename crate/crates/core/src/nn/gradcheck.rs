use super::layer::{backprop_gradients, forward_trace, loss_value, DenseLayer, Loss};
use crate::error::Result;
use crate::rng::Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a − f| / max(|a|, |f|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares `analytic[i]` against the central difference of `f` at each
/// probed parameter index. Returns the worst relative error (0 when there
/// are no probes).
pub fn max_relative_error<F>(params: &[f64], analytic: &[f64], probes: &[usize], mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in probes {
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let plus = f(&work);
        work[i] = orig - FD_STEP;
        let minus = f(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

fn unflatten_into(params: &[f64], layers: &mut [DenseLayer]) {
    let mut off = 0;
    for l in layers {
        let w = l.weights.as_mut_slice();
        w.copy_from_slice(&params[off..off + w.len()]);
        off += w.len();
        let n = l.bias.len();
        l.bias.copy_from_slice(&params[off..off + n]);
        off += n;
    }
}

/// Checks [`backprop_gradients`] against central finite differences at
/// `n_probes` randomly chosen parameters.
pub fn gradient_check(
    layers: &[DenseLayer],
    x: &[f64],
    target: &[f64],
    loss: Loss,
    n_probes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let analytic = backprop_gradients(layers, x, target, loss)?.flatten();
    let params = flatten(layers);
    if params.is_empty() {
        return Ok(0.0);
    }
    let probes: Vec<usize> = (0..n_probes.max(1)).map(|_| rng.below(params.len())).collect();
    let mut scratch = layers.to_vec();
    Ok(max_relative_error(&params, &analytic, &probes, |p| {
        unflatten_into(p, &mut scratch);
        let trace = forward_trace(&scratch, x).expect("shapes validated above");
        loss_value(&trace, target, loss)
    }))
}
