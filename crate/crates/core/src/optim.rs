//! AdamW with decoupled weight decay, plus global gradient-norm clipping.

use crate::error::{EvaError, Result};
use crate::tensor::Tensor;

/// Per-parameter moment accumulators and the shared hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Moments sized to `params`; betas and weight decay default to
    /// (0.9, 0.95, 0.05).
    pub fn new(params: &[Tensor], learning_rate: f64) -> Self {
        OptimizerState {
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            epsilon: 1e-8,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.first_moment[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.second_moment[i]
    }
}

/// One decoupled-weight-decay Adam update:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(EvaError::ShapeMismatch(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(EvaError::ShapeMismatch(format!(
                "adamw_step: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = g.data()[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= state.learning_rate
                * (m_hat / (v_hat.sqrt() + state.epsilon) + state.weight_decay * data[j]);
        }
        p.validate()?;
    }
    Ok(())
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(EvaError::InvalidArgument(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_vec(vec![1.0, -2.0]).unwrap()];
        let grads = vec![Tensor::zeros(&[2])];
        let mut state = OptimizerState::new(&params, 0.1).with_weight_decay(0.0);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(state.step_count, 1);
        assert_eq!(state.first_moment(0), &[0.0, 0.0]);
        assert_eq!(state.second_moment(0), &[0.0, 0.0]);
    }

    #[test]
    fn first_step_moves_lr_per_coordinate() {
        // After bias correction the first update is lr * g / (|g| + eps),
        // i.e. approximately lr in the direction of -sign(g).
        let lr = 0.01;
        let mut params = vec![Tensor::from_vec(vec![0.5, -0.5]).unwrap()];
        let grads = vec![Tensor::from_vec(vec![3.0, -0.2]).unwrap()];
        let mut state = OptimizerState::new(&params, lr).with_weight_decay(0.0);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        let d0 = (params[0].data()[0] - 0.5).abs();
        let d1 = (params[0].data()[1] + 0.5).abs();
        assert!((d0 - lr).abs() < 1e-6, "step size {d0}");
        assert!((d1 - lr).abs() < 1e-6, "step size {d1}");
        assert!(params[0].data()[0] < 0.5, "moves against positive gradient");
        assert!(params[0].data()[1] > -0.5, "moves against negative gradient");
    }

    #[test]
    fn decoupled_decay_only() {
        // grad 0, weight decay 0.05 -> p' = p * (1 - lr * 0.05)
        let lr = 0.1;
        let mut params = vec![Tensor::from_vec(vec![2.0, -4.0]).unwrap()];
        let grads = vec![Tensor::zeros(&[2])];
        let mut state = OptimizerState::new(&params, lr).with_weight_decay(0.05);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        let f = 1.0 - lr * 0.05;
        assert!((params[0].data()[0] - 2.0 * f).abs() < 1e-12);
        assert!((params[0].data()[1] + 4.0 * f).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::zeros(&[2])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut state = OptimizerState::new(&params, 0.1);
        assert!(adamw_step(&mut params, &grads, &mut state).is_err());
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = vec![Tensor::from_vec(vec![3.0, 4.0]).unwrap()];
        let norm = clip_grad_norm(&mut grads, 10.0).unwrap();
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut grads = vec![Tensor::from_vec(vec![3.0, 4.0]).unwrap()];
        clip_grad_norm(&mut grads, 1.0).unwrap();
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((grads[0].data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_ignores_zero_gradients() {
        let mut grads = vec![Tensor::zeros(&[4])];
        let norm = clip_grad_norm(&mut grads, 1.0).unwrap();
        assert_eq!(norm, 0.0);
        assert_eq!(grads[0].data(), &[0.0; 4]);
    }

    #[test]
    fn clipped_norm_never_exceeds_bound() {
        use crate::rng::StreamRng;
        for seed in 0..50 {
            let mut rng = StreamRng::new(seed, 1);
            let mut grads = vec![
                Tensor::randn(&[7], 10.0, &mut rng),
                Tensor::randn(&[3], 10.0, &mut rng),
            ];
            clip_grad_norm(&mut grads, 1.0).unwrap();
            let norm = grads
                .iter()
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            assert!(norm <= 1.0 + 1e-12, "norm {norm}");
        }
    }
}
