use rand::seq::index::sample;

use super::{compute_loss, LossKind, MicroNet, Tensor};
use crate::error::{Error, Result};
use crate::seed::rng_from;

const DEFAULT_SAMPLES: usize = 128;

/// Largest relative error between analytic and central-difference
/// gradients over a seeded parameter subset.
pub fn grad_check(net: &MicroNet, x: &Tensor, target: &[f64], mask: f64, loss: LossKind, eps: f64) -> Result<f64> {
    grad_check_with(net, x, target, mask, loss, eps, DEFAULT_SAMPLES, 0)
}

/// As [`grad_check`], with the subset size and seed exposed. Every weight
/// and bias block contributes to the subset.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_with(
    net: &MicroNet,
    x: &Tensor,
    target: &[f64],
    mask: f64,
    loss: LossKind,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {eps}")));
    }
    if samples < 100 && samples < net.param_count() {
        return Err(Error::arg("gradient check needs at least 100 parameters"));
    }
    let (out, cache) = net.forward(x)?;
    let (_, up) = compute_loss(loss, out.data(), target, mask)?;
    let analytic = net.backward(&cache, &up)?;

    let blocks = net.param_blocks();
    let per_block = samples.div_ceil(blocks.len());
    let mut rng = rng_from(seed);
    let mut chosen = Vec::new();
    for (off, len) in blocks {
        if len <= per_block {
            chosen.extend(off..off + len);
        } else {
            chosen.extend(sample(&mut rng, len, per_block).into_iter().map(|i| off + i));
        }
    }

    let mut probe = net.clone();
    let loss_at = |probe: &MicroNet| -> Result<f64> {
        let out = probe.predict(x)?;
        Ok(compute_loss(loss, &out, target, mask)?.0)
    };
    let mut worst = 0.0f64;
    for i in chosen {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let plus = loss_at(&probe)?;
        probe.params_mut()[i] = orig - eps;
        let minus = loss_at(&probe)?;
        probe.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
