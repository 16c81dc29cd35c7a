use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moments for each parameter and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], hyper: AdamWConfig) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.data().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data().len()]).collect(),
        }
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[&str],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).copied().unwrap_or("?");
        if p.shape() != g.shape() || state.m[i].len() != p.data().len() {
            return Err(Error::Shape {
                op: "adamw_step",
                detail: format!("parameter {name}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= 1.0 - h.lr * h.weight_decay;
            *mj = h.beta1 * *mj + (1.0 - h.beta1) * gj;
            *vj = h.beta2 * *vj + (1.0 - h.beta2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *w -= h.lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(())
}
