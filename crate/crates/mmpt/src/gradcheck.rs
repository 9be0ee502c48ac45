//! Central-difference gradient checking. The loss closure is the only
//! contract: given parameter tensors it returns the loss, and analytic
//! gradients when asked, so any layer or the whole model can sit behind it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct FdSettings {
    /// Central-difference step h; loss is probed at θ ± h.
    pub step: f64,
    /// Components checked per tensor; 0 means every component.
    pub max_samples_per_tensor: usize,
    pub seed: u64,
    /// Denominator floor for the relative error. Gradients below the floor
    /// are judged on absolute disagreement of floor·tolerance, which keeps
    /// finite-difference roundoff on near-zero components from drowning the
    /// signal on the components that matter.
    pub floor: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            step: 1e-5,
            max_samples_per_tensor: 0,
            seed: 0,
            floor: 1e-8,
        }
    }
}

/// Worst relative disagreement between analytic and numeric gradients:
/// |a − n| / max(|a|, |n|, floor), maximized over checked components.
///
/// `f(params, want_grads)` returns the loss and, when asked, one gradient
/// tensor per parameter (zeros where a parameter has no influence).
pub fn grad_check<F>(mut f: F, params: &[Tensor<f64>], settings: &FdSettings) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)>,
{
    let (_, grads) = f(params, true)?;
    let grads = grads.ok_or_else(|| Error::Numeric("grad_check: closure returned no gradients".into()))?;
    if grads.len() != params.len() {
        return Err(Error::Numeric(format!(
            "grad_check: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (g, p) in grads.iter().zip(params) {
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "grad_check",
                lhs: g.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for t in 0..params.len() {
        let len = params[t].len();
        let picks: Vec<usize> = if settings.max_samples_per_tensor == 0 || len <= settings.max_samples_per_tensor {
            (0..len).collect()
        } else {
            let mut chosen = std::collections::BTreeSet::new();
            while chosen.len() < settings.max_samples_per_tensor {
                chosen.insert(rng.gen_range(0..len));
            }
            chosen.into_iter().collect()
        };
        for i in picks {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + settings.step;
            let (hi, _) = f(&work, false)?;
            work[t].data_mut()[i] = orig - settings.step;
            let (lo, _) = f(&work, false)?;
            work[t].data_mut()[i] = orig;
            let numeric = (hi - lo) / (2.0 * settings.step);
            let analytic = grads[t].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(settings.floor);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
