//! Finite-difference gradient checking.
//!
//! The independent oracle for the reverse-mode implementation: central
//! differences evaluated coordinate by coordinate, compared against the
//! analytic gradient with a relative-error metric.

use super::backward::grad;
use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compare analytic gradients of the scalar built by `build` against central
/// finite differences at `point`, perturbing one coordinate at a time by
/// `h`. Returns the maximum relative error over all coordinates, with
/// denominator `max(|analytic|, |numeric|, 1e-12)`.
///
/// `build` is called with freshly created leaves each evaluation, so it must
/// be a pure function of the leaf values.
pub fn check_gradient<F>(build: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let eval_at = |tensors: &[Tensor]| -> Result<f64> {
        let leaves: Vec<Var> = tensors.iter().map(|t| Var::leaf(t.clone())).collect();
        let root = build(&leaves)?;
        let v = root.value().scalar_f64()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "check_gradient objective".into(),
            });
        }
        Ok(v)
    };

    // Analytic gradients at the unperturbed point.
    let leaves: Vec<Var> = point.iter().map(|t| Var::leaf(t.clone())).collect();
    let root = build(&leaves)?;
    if !root.value().is_scalar() {
        return Err(Error::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    let gmap = grad(&root, &leaves)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|l| {
            let g = gmap.get_or_zero(l);
            g.value().clone()
        })
        .collect();
    for (i, g) in analytic.iter().enumerate() {
        if !g.is_all_finite() {
            return Err(Error::NonFinite {
                context: format!("analytic gradient of input {i}"),
            });
        }
    }

    let mut max_rel = 0.0f64;
    for (i, t) in point.iter().enumerate() {
        let base = t.to_f64_vec();
        for j in 0..base.len() {
            let mut plus = point.to_vec();
            let mut minus = point.to_vec();
            let mut pj = base.clone();
            let mut mj = base.clone();
            pj[j] += h;
            mj[j] -= h;
            plus[i] = Tensor::from_f64(t.shape().to_vec(), pj)?.cast(t.dtype());
            minus[i] = Tensor::from_f64(t.shape().to_vec(), mj)?.cast(t.dtype());
            let numeric = (eval_at(&plus)? - eval_at(&minus)?) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("finite difference of input {i} coordinate {j}"),
                });
            }
            let a = analytic[i].get_f64(j);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
