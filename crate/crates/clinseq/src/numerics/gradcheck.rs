//! Central-difference gradient verification.
//!
//! The check is the trust anchor for the whole autodiff stack: any new op
//! gets a finite-difference test before anything downstream may rely on
//! its backward pass.

use crate::error::Result;
use crate::numerics::tensor::{no_grad, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per named parameter.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst_tensor: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares analytic gradients of `loss_fn` against central differences
/// with the given probe `step` for every element of every parameter.
///
/// `loss_fn` must rebuild the graph from the parameter tensors on each
/// call (their raw data is perturbed in place between calls). Relative
/// error is `|a - fd| / max(|a|, |fd|, 1e-6)`, so a pair of exact zeros
/// compares equal rather than dividing by zero.
pub fn check_gradients(
    params: &[(String, Tensor)],
    mut loss_fn: impl FnMut() -> Result<Tensor>,
    step: f64,
) -> Result<GradCheckReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut per_tensor = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_tensor = None;
    for ((name, p), grad) in params.iter().zip(&analytic) {
        let mut worst = 0.0f64;
        for i in 0..p.len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + step;
            let up = no_grad(&mut loss_fn)?.item()?;
            p.data_mut()[i] = orig - step;
            let down = no_grad(&mut loss_fn)?.item()?;
            p.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = grad[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
        if worst > max_rel_err {
            max_rel_err = worst;
            worst_tensor = Some(name.clone());
        }
        per_tensor.push((name.clone(), worst));
    }
    Ok(GradCheckReport {
        per_tensor,
        max_rel_err,
        worst_tensor,
    })
}
