use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.5, beta2: 0.99, eps: 1e-8 }
    }
}

/// First/second moment buffers for one [`ParamSet`], in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update using the gradients accumulated in `params`.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, hyper: AdamHyper, lr: f64) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::dim(format!(
            "optimizer state tracks {} tensors, parameter set has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((tensor, m), v) in params.tensors_mut().zip(&mut state.m).zip(&mut state.v) {
        let (data, grad) = tensor.data_and_grad_mut();
        let Some(grad) = grad else { continue };
        if m.len() != data.len() || v.len() != data.len() {
            return Err(Error::dim("optimizer moment buffer does not match parameter"));
        }
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
