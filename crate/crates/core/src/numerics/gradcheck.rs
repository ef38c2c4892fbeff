//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::layers::HasParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Fraction of coordinates sampled per parameter.
    pub fraction: f64,
    /// Lower bound on sampled coordinates per parameter (all of them if smaller).
    pub min_coords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            fraction: 0.05,
            min_coords: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over sampled coordinates of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// Worst error per parameter name, in parameter order.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

/// Compares the gradients written by `loss` against central differences.
///
/// `loss` must run a full forward and backward pass, accumulating gradients
/// into the parameters of `model`, and return the scalar loss.
pub fn finite_diff_check<M, F, R>(model: &mut M, mut loss: F, cfg: GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    M: HasParams,
    F: FnMut(&mut M) -> Result<f64>,
    R: Rng + ?Sized,
{
    model.zero_grads();
    let first = loss(model)?;
    let analytic: Vec<_> = model.params().iter().map(|p| p.grad.clone()).collect();
    model.zero_grads();
    let second = loss(model)?;
    model.zero_grads();
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let n_params = analytic.len();
    let mut per_param = Vec::with_capacity(n_params);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for pi in 0..n_params {
        let len = analytic[pi].data().len();
        let want = ((len as f64 * cfg.fraction).ceil() as usize).max(cfg.min_coords).min(len);
        let coords = sample(rng, len, want).into_vec();
        let mut param_worst = 0.0f64;
        for idx in coords {
            let original = model.params()[pi].value.data()[idx];
            model.params_mut()[pi].value.data_mut()[idx] = original + cfg.step;
            let plus = loss(model)?;
            model.params_mut()[pi].value.data_mut()[idx] = original - cfg.step;
            let minus = loss(model)?;
            model.params_mut()[pi].value.data_mut()[idx] = original;
            model.zero_grads();

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = (analytic[pi].data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            param_worst = param_worst.max(err);
            checked += 1;
        }
        worst = worst.max(param_worst);
        per_param.push((model.params()[pi].name.clone(), param_worst));
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        per_param,
        coords_checked: checked,
    })
}
