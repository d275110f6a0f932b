use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Moment buffers and hyper-parameters of one Adam-optimized buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON)
    }

    pub fn with_hyper(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
///
/// Nothing is modified when an error is returned.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            &[param.len(), state.first_moment.len()],
            &[grad.len()],
        ));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        param[i] -= lr * (m / c1) / ((v / c2).sqrt() + state.epsilon);
    }
    Ok(())
}

/// Step decay: `base_lr * gamma^floor(t / step_size)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub step_size: u64,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, step_size: u64, gamma: f64) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::invalid(format!(
                "base learning rate must be positive, got {base_lr}"
            )));
        }
        if step_size == 0 {
            return Err(Error::invalid("scheduler step size must be positive"));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::invalid(format!(
                "scheduler gamma must lie in (0, 1], got {gamma}"
            )));
        }
        Ok(LrSchedule {
            base_lr,
            step_size,
            gamma,
        })
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let decays = iteration / self.step_size;
        self.base_lr * self.gamma.powi(decays.min(i32::MAX as u64) as i32)
    }
}
