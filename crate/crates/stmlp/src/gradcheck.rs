//! Finite-difference verification of reverse-mode gradients.
//!
//! Always runs in f64; central differences lose too many digits in f32.
//! The function under test must be deterministic (dropout in eval mode or
//! with `p = 0`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Relative disagreement between an analytic and a numeric derivative,
/// `|a - n| / max(|a| + |n|, 1e-8)`; zero when both are zero.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradients returned by `loss_and_grads` against central
/// finite differences `(f(p+eps) - f(p-eps)) / (2 eps)` on up to
/// `coords_per_param` randomly sampled coordinates of each parameter, and
/// returns the worst relative error seen.
pub fn grad_check<F>(
    mut loss_and_grads: F,
    params: &[Tensor<f64>],
    eps: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArg("gradcheck eps must be positive".into()));
    }
    let (f0, grads) = loss_and_grads(params)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("gradcheck loss".into()));
    }
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradcheck got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (p, grad) in grads.iter().enumerate() {
        if grad.len() != params[p].numel() {
            return Err(Error::Shape(format!(
                "gradient {p} has {} entries, parameter has {}",
                grad.len(),
                params[p].numel()
            )));
        }
        let n = params[p].numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for &i in &coords {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (f_plus, _) = loss_and_grads(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let (f_minus, _) = loss_and_grads(&work)?;
            work[p].data_mut()[i] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite("gradcheck perturbed loss".into()));
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            max_rel = max_rel.max(rel_err(grad[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, coords_checked: checked })
}
