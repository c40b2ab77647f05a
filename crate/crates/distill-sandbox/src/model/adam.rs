//! Adam with bias correction and a cosine learning-rate schedule.
//!
//! The optimizer never sees tensor structure: moments are flat buffers laid
//! out like the parameters. A step refuses non-finite gradients before
//! touching anything, and refuses to leave parameters non-finite after the
//! update, so divergence is caught at the exact step it happens.

use crate::error::{Error, Result};

use super::{GradBuf, ModelParams};

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n_params: usize, base_lr: f64) -> OptimizerState {
        OptimizerState {
            step: 0,
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One update at an explicit learning rate.
pub fn adam_step_with_lr(
    params: &mut ModelParams,
    grads: &GradBuf,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.data.len() != params.data.len() || state.m.len() != params.data.len() {
        return Err(Error::ShapeMismatch("optimizer buffers do not match parameters".into()));
    }
    if let Some(tensor) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { tensor: tensor.to_string() });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.data.len() {
        let g = grads.data[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params.data[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    if let Some(i) = params.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: state.step,
            detail: format!("parameter tensor {} became non-finite", params.layout().name_at(i)),
        });
    }
    Ok(())
}

/// One update at the cosine-annealed rate for `progress` through training
/// (0 at the first step, 1 at the last).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradBuf,
    state: &mut OptimizerState,
    progress: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::InvalidArgument(format!("progress {progress} outside [0, 1]")));
    }
    let lr = state.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    adam_step_with_lr(params, grads, state, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_params() -> ModelParams {
        ModelParams::init(&ModelConfig {
            n_layers: 2,
            d_model: 4,
            n_heads: 2,
            max_seq_len: 4,
            vocab_size: 3,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn descends_a_quadratic() {
        // loss = sum(p^2)/2 has gradient p; Adam should push parameters to 0
        let mut params = tiny_params();
        for v in params.data.iter_mut() {
            *v = 0.5;
        }
        let mut state = OptimizerState::new(params.data.len(), 0.05);
        let before: f64 = params.data.iter().map(|v| v * v).sum();
        for _ in 0..200 {
            let mut grads = GradBuf::zeros_like(&params);
            grads.data.copy_from_slice(&params.data);
            adam_step_with_lr(&mut params, &grads, &mut state, 0.05).unwrap();
        }
        let after: f64 = params.data.iter().map(|v| v * v).sum();
        assert!(after < before * 1e-3, "{before} -> {after}");
        assert_eq!(state.step, 200);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let mut params = tiny_params();
        let mut state = OptimizerState::new(params.data.len(), 0.1);
        let flat = params.data.clone();
        let mut grads = GradBuf::zeros_like(&params);
        grads.data.fill(1.0);
        // at progress 1 the rate is 0: parameters must not move
        adam_step(&mut params, &grads, &mut state, 1.0).unwrap();
        assert_eq!(params.data, flat);
        // at progress 0 the rate is the base rate: parameters move
        adam_step(&mut params, &grads, &mut state, 0.0).unwrap();
        assert_ne!(params.data, flat);
        assert!(adam_step(&mut params, &grads, &mut state, 1.5).is_err());
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut params = tiny_params();
        let mut state = OptimizerState::new(params.data.len(), 0.01);
        let mut grads = GradBuf::zeros_like(&params);
        grads.data[7] = f64::NAN;
        let err = adam_step_with_lr(&mut params, &grads, &mut state, 0.01);
        assert!(matches!(err, Err(Error::NonFiniteGradient { .. })));
        // the failed step must not advance the counter past the check
        assert_eq!(state.step, 0);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut params = tiny_params();
            let mut state = OptimizerState::new(params.data.len(), 0.02);
            for s in 0..20 {
                let mut grads = GradBuf::zeros_like(&params);
                for (i, g) in grads.data.iter_mut().enumerate() {
                    *g = ((i + s) % 7) as f64 * 0.1 - 0.3;
                }
                adam_step(&mut params, &grads, &mut state, s as f64 / 19.0).unwrap();
            }
            params.data
        };
        assert_eq!(run(), run());
    }
}
