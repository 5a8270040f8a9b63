//! Adam with L2 weight decay and a piecewise-constant learning-rate schedule.

use crate::error::{Result, StaError};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    /// Zeroed accumulators shaped like `params`, with the usual β/ε defaults.
    pub fn new(params: &[&Tensor], weight_decay: f64) -> Self {
        Self {
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One bias-corrected Adam update. Weight decay enters as `wd·θ` added to the gradient.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(StaError::arg(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(StaError::dim("parameter count", state.first_moment.len(), params.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        g.expect_shape(&format!("gradient {i}"), p.shape())?;
        state.first_moment[i].expect_shape(&format!("adam moment {i}"), p.shape())?;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let grad = gj + state.weight_decay * *theta;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * grad;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * grad * grad;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Base rate plus `(epoch threshold, rate)` steps; the last threshold reached wins.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub steps: Vec<(u32, f64)>,
}

impl LrSchedule {
    pub fn new(base: f64, steps: Vec<(u32, f64)>) -> Result<Self> {
        if !(base > 0.0) || steps.iter().any(|&(_, r)| !(r > 0.0)) {
            return Err(StaError::config("learning rates must be positive"));
        }
        if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(StaError::config("schedule thresholds must be strictly increasing"));
        }
        Ok(Self { base, steps })
    }

    /// 3e-4, then 3e-5 from epoch 200 and 3e-6 from epoch 400.
    pub fn reference() -> Self {
        Self::new(3e-4, vec![(200, 3e-5), (400, 3e-6)]).expect("valid schedule")
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: u32) -> f64 {
    schedule
        .steps
        .iter()
        .take_while(|&&(threshold, _)| epoch >= threshold)
        .last()
        .map_or(schedule.base, |&(_, rate)| rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&p], 0.0);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let g = Tensor::from_vec(vec![3.0, -0.02]);
        let mut st = AdamState::new(&[&p], 0.0);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.01).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-8);
        assert!((p.data()[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // scalar recurrence, written out independently of adam_step
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            theta -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            reference.push(theta);
        }
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new(&[&p], 0.0);
        let mut prev = 1.0f64;
        for &r in &reference {
            let g = p.map(|x| 2.0 * x);
            adam_step(&mut [&mut p], &[&g], &mut st, 0.1).unwrap();
            let now = p.data()[0];
            assert!((now - r).abs() < 1e-14);
            assert!(now.abs() < prev.abs());
            prev = now;
        }
    }

    #[test]
    fn weight_decay_acts_as_l2() {
        let mut p = Tensor::from_vec(vec![2.0]);
        let g = Tensor::zeros(&[1]);
        let mut st = AdamState::new(&[&p], 5e-4);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.01).unwrap();
        assert!(p.data()[0] < 2.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::from_vec(vec![2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&p], 0.0);
        assert!(matches!(adam_step(&mut [&mut p], &[&g], &mut st, 0.1), Err(StaError::Dimension { .. })));
    }

    #[test]
    fn reference_schedule() {
        let s = LrSchedule::reference();
        assert_eq!(lr_at(&s, 0), 3e-4);
        assert_eq!(lr_at(&s, 199), 3e-4);
        assert_eq!(lr_at(&s, 200), 3e-5);
        assert_eq!(lr_at(&s, 250), 3e-5);
        assert_eq!(lr_at(&s, 500), 3e-6);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(1e-3, vec![(5, 1e-4), (5, 1e-5)]).is_err());
        assert!(LrSchedule::new(0.0, vec![]).is_err());
    }
}
