//! Central-difference gradient oracle, independent of the tape's adjoints.
//! The function under test must be deterministic between the two probe
//! evaluations (freeze any noise draws by cloning RNG state per call).

use crate::element::Element;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / (2h)` per element.
pub fn finite_difference_grad<E, F>(mut f: F, x: &Tensor<E>, h: f64) -> Result<Tensor<E>>
where
    E: Element,
    F: FnMut(&Tensor<E>) -> Result<E>,
{
    if !(h > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = vec![E::zero(); x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + E::from_f64(h);
        let plus = f(&probe)?.to_f64();
        probe.data_mut()[i] = orig - E::from_f64(h);
        let minus = f(&probe)?.to_f64();
        probe.data_mut()[i] = orig;
        grad[i] = E::from_f64((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Outcome of comparing an analytic gradient against a numerical one.
#[derive(Debug, Clone, Copy)]
pub struct GradComparison {
    /// Max of |a−n| / max(|a|,|n|) over elements with |a| ≥ `small_threshold`.
    pub max_rel: f64,
    /// Max absolute difference over elements with |a| < `small_threshold`.
    pub max_abs_small: f64,
    pub worst_index: usize,
}

pub const SMALL_GRAD_THRESHOLD: f64 = 1e-8;

/// Compare gradients elementwise: relative error for elements with
/// |analytic| ≥ 1e-8, absolute difference below that.
pub fn compare_gradients<E: Element>(
    analytic: &Tensor<E>,
    numeric: &Tensor<E>,
) -> Result<GradComparison> {
    if analytic.shape() != numeric.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "gradient shapes differ: {:?} vs {:?}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    let mut cmp = GradComparison {
        max_rel: 0.0,
        max_abs_small: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let (a, n) = (a.to_f64(), n.to_f64());
        let diff = (a - n).abs();
        if a.abs() < SMALL_GRAD_THRESHOLD {
            if diff > cmp.max_abs_small {
                cmp.max_abs_small = diff;
                cmp.worst_index = i;
            }
        } else {
            let rel = diff / a.abs().max(n.abs());
            if rel > cmp.max_rel {
                cmp.max_rel = rel;
                cmp.worst_index = i;
            }
        }
    }
    Ok(cmp)
}

impl GradComparison {
    /// True when all elements fall inside the given tolerances.
    pub fn within(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel < rel_tol && self.max_abs_small < abs_tol
    }
}
