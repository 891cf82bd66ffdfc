//! LAMB-rule optimizer: Adam-style moments with a per-tensor trust ratio.

use crate::model::ParamStore;
use crate::nn::{Scalar, Tensor};

use super::TrainError;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LambHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied only to parameters flagged for decay.
    pub weight_decay: f64,
    /// Trust ratios are clamped into `[0, trust_clamp]`.
    pub trust_clamp: f64,
}

impl Default for LambHyper {
    fn default() -> Self {
        LambHyper { lr: 1.6e-4, beta1: 0.9, beta2: 0.99, eps: 1e-6, weight_decay: 0.0, trust_clamp: 10.0 }
    }
}

/// First/second moment accumulators, one pair per parameter slot.
#[derive(Debug, Clone)]
pub struct LambState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Scalar> LambState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        LambState { m, v, step: 0 }
    }
}

/// One LAMB update over every trainable parameter.
///
/// Moments and parameters stay in the working precision; the per-element
/// arithmetic runs in f64 so resumed and uninterrupted runs agree bit-exactly.
/// Parameters without an accumulated gradient this step see a zero gradient.
pub fn lamb_step<F: Scalar>(
    params: &mut ParamStore<F>,
    state: &mut LambState<F>,
    hyper: &LambHyper,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), state.m.len(), "state must match the parameter store");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for idx in 0..params.len() {
        if !params.at(idx).trainable {
            continue;
        }
        if let Some(g) = &params.at(idx).grad {
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient { param: params.at(idx).name.clone() });
            }
        }
        let decay = params.at(idx).decay;
        let n = params.at(idx).value.numel();
        let mut update = vec![0.0f64; n];
        let mut w_sq = 0.0f64;
        let mut r_sq = 0.0f64;
        {
            let p = params.at(idx);
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            for i in 0..n {
                let g = p.grad.as_ref().map_or(0.0, |g| g.data()[i].as_f64());
                let mi = hyper.beta1 * m.data()[i].as_f64() + (1.0 - hyper.beta1) * g;
                let vi = hyper.beta2 * v.data()[i].as_f64() + (1.0 - hyper.beta2) * g * g;
                m.data_mut()[i] = F::from_f64(mi);
                v.data_mut()[i] = F::from_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let w = p.value.data()[i].as_f64();
                let mut r = m_hat / (v_hat.sqrt() + hyper.eps);
                if decay {
                    r += hyper.weight_decay * w;
                }
                update[i] = r;
                w_sq += w * w;
                r_sq += r * r;
            }
        }
        let w_norm = w_sq.sqrt();
        let r_norm = r_sq.sqrt();
        let trust = if w_norm == 0.0 || r_norm == 0.0 {
            1.0
        } else {
            (w_norm / r_norm).clamp(0.0, hyper.trust_clamp)
        };
        let scale = hyper.lr * trust;
        let value = &mut params.at_mut(idx).value;
        for i in 0..n {
            let w = value.data()[i].as_f64();
            value.data_mut()[i] = F::from_f64(w - scale * update[i]);
        }
    }
    Ok(())
}
