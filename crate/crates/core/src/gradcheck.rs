//! Central finite differences — the oracle every backward rule is checked
//! against.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{numeric_err, Result};
use crate::math;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.dims().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(numeric_err!(
                "finite_diff_grad: non-finite objective at entry {i}"
            ));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error between an analytic and a numeric gradient entry,
/// normalized so tiny gradients are judged on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    math::abs(analytic - numeric) / f64::max(1.0, f64::max(math::abs(analytic), math::abs(numeric)))
}

/// Largest per-entry [`rel_err`] between two gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// One line of a gradient verification report.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
}

impl TensorCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= tolerance
    }
}

pub fn all_passed(checks: &[TensorCheck], tolerance: f64) -> bool {
    !checks.is_empty() && checks.iter().all(|c| c.passed(tolerance))
}

/// Verify the analytic gradients of every trainable tensor in `params`
/// against finite differences of `loss_fn`.
///
/// `loss_fn` must evaluate the full forward pass from the current contents
/// of the store; `analytic` is the already-computed gradient per tensor.
pub fn check_store<F>(
    params: &mut crate::params::ParamStore,
    mut loss_fn: F,
    h: f64,
) -> Result<Vec<TensorCheck>>
where
    F: FnMut(&crate::params::ParamStore) -> Result<f64>,
{
    let ids: Vec<_> = params.trainable_ids();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = params
            .get(id)
            .grad
            .clone()
            .ok_or_else(|| numeric_err!("no analytic gradient for {}", params.name(id)))?;
        let numel = params.get(id).numel();
        let mut numeric = Vec::with_capacity(numel);
        for i in 0..numel {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let plus = loss_fn(params)?;
            params.get_mut(id).data_mut()[i] = orig - h;
            let minus = loss_fn(params)?;
            params.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(numeric_err!(
                    "gradcheck: non-finite loss while perturbing {}",
                    params.name(id)
                ));
            }
            numeric.push((plus - minus) / (2.0 * h));
        }
        checks.push(TensorCheck {
            name: String::from(params.name(id)),
            max_rel_err: max_rel_err(&analytic, &numeric),
        });
    }
    Ok(checks)
}
