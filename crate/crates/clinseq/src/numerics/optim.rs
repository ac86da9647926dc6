//! AdamW with decoupled weight decay, plus global gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, serialized with checkpoints so a
/// resumed run continues the exact same trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub struct AdamW {
    cfg: AdamWConfig,
    state: AdamWState,
}

impl AdamW {
    /// Fresh optimizer for the given parameter list (order matters and
    /// must stay stable across steps and checkpoints).
    pub fn new(cfg: AdamWConfig, params: &[Tensor]) -> Self {
        AdamW {
            cfg,
            state: AdamWState {
                step: 0,
                m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
                v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            },
        }
    }

    pub fn from_state(cfg: AdamWConfig, state: AdamWState) -> Self {
        AdamW { cfg, state }
    }

    pub fn state(&self) -> &AdamWState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// One update over all parameters at learning rate `lr`.
    ///
    /// Any non-finite gradient entry aborts before touching parameters or
    /// moments, so the caller can skip the step and move on. Parameters
    /// without a gradient (unreached leaves) are treated as zero-grad.
    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.state.m.len() {
            return Err(Error::Numerics {
                op: "adamw_step",
                reason: format!(
                    "{} params but state holds {}",
                    params.len(),
                    self.state.m.len()
                ),
            });
        }
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params[i].len() {
                return Err(Error::Numerics {
                    op: "adamw_step",
                    reason: format!("grad length {} != param length {}", g.len(), params[i].len()),
                });
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numerics {
                    op: "adamw_step",
                    reason: format!("non-finite gradient entry {bad} in param {i}"),
                });
            }
        }

        let t = self.state.step + 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for ((p, g), (m, v)) in params
            .iter()
            .zip(&grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            let mut data = p.data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * data[i]);
            }
        }
        self.state.step = t;
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
///
/// Returns the pre-clip norm. Applying it twice is a no-op: once the norm
/// is under the cap the scale factor is 1.
pub fn clip_grad_norm(params: &[Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            for x in &g {
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerics {
            op: "clip_grad_norm",
            reason: format!("gradient norm {norm}"),
        });
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params {
            if let Some(mut g) = p.grad() {
                for x in &mut g {
                    *x *= scale;
                }
                p.zero_grad();
                p.set_grad(g);
            }
        }
    }
    Ok(norm)
}
