//! Adam optimizer with bias-corrected first and second moments.

use super::{NumgradError, Result, Tensor};

/// Optimizer hyperparameters. Defaults: `lr = 1e-3`, `beta1 = 0.9`,
/// `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.eps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(NumgradError::Invalid {
                op: "adam",
                msg: format!("bad hyperparameters {self:?}"),
            })
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
/// Zero-initialized; shapes are fixed at construction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments matching the given parameters.
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One Adam update, in place. `t` is the 1-based step count used for bias
/// correction; callers pass 1 on the first update and increment from there.
/// `grads[i]` must match the shape of `params[i]`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamHyper,
    t: u64,
) -> Result<()> {
    hyper.validate()?;
    if t == 0 {
        return Err(NumgradError::Invalid {
            op: "adam",
            msg: "step count t is 1-based; got 0".into(),
        });
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumgradError::Invalid {
            op: "adam",
            msg: format!(
                "got {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(NumgradError::ShapeMismatch {
                op: "adam",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if state.m[i].len() != p.numel() {
            return Err(NumgradError::Invalid {
                op: "adam",
                msg: format!("state {i} sized for {} values, param has {}", state.m[i].len(), p.numel()),
            });
        }
    }

    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            pd[j] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
