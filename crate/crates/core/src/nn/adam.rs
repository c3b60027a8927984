use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, MlpParams};
use super::train::TrainConfig;
use crate::error::{Error, Result};

/// First and second moments mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: MlpParams,
    pub second: MlpParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        AdamState { first: params.zeros_like(), second: params.zeros_like(), step: 0 }
    }
}

/// Clips the gradient to `grad_clip_norm` globally, shrinks the parameters by
/// `1 - lr * weight_decay`, then applies the bias-corrected Adam update.
/// A non-finite gradient leaves parameters and state untouched.
pub fn adam_step(params: &mut MlpParams, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::invalid("gradient layout does not match parameters"));
    }
    for (idx, g) in grads.layers.iter().enumerate() {
        if !g.weights.iter().chain(&g.bias).all(|x| x.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: idx });
        }
    }
    let norm = grads.global_norm();
    let clip = if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm { cfg.grad_clip_norm / norm } else { 1.0 };

    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - libm::pow(b1, t);
    let c2 = 1.0 - libm::pow(b2, t);
    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;

    let layers = params.layers.iter_mut().zip(&grads.layers).zip(state.first.layers.iter_mut().zip(&mut state.second.layers));
    for ((p, g), (m, v)) in layers {
        let tensors = [
            (&mut p.weights, &g.weights, &mut m.weights, &mut v.weights),
            (&mut p.bias, &g.bias, &mut m.bias, &mut v.bias),
        ];
        for (p, g, m, v) in tensors {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * clip;
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / (libm::sqrt(*v / c2) + cfg.adam_eps);
            }
        }
    }
    Ok(())
}
