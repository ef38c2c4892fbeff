use std::collections::HashMap;

use super::layers::Parameter;
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Adam with bias correction and decoupled weight decay.
///
/// Moments are keyed by parameter name, so the same optimizer can be driven
/// with any subset of parameters as long as names are unique.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Matrix, Matrix)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that received a gradient, then zeroes all grads.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f64) -> Result<()> {
        if !params.iter().any(|p| p.has_grad()) {
            return Err(Error::EmptyGradient);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            if !p.grad.is_finite() {
                return Err(Error::Numeric("gradient"));
            }
            let (m, v) = self.moments.entry(p.name.clone()).or_insert_with(|| {
                (
                    Matrix::zeros(p.value.rows(), p.value.cols()),
                    Matrix::zeros(p.value.rows(), p.value.cols()),
                )
            });
            m.same_shape(&p.value, "adam moments")?;
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let Parameter { value, grad, .. } = &mut **p;
            for (((w, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, decay: bool) -> Parameter {
        Parameter::new("x", Matrix::row_vector(&[v]), decay)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(0.0, false);
        p.accumulate(&Matrix::row_vector(&[1.0])).unwrap();
        Adam::new(0.0).step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value.get(0, 0) + 0.1).abs() < 1e-7);
        assert_eq!(p.grad.get(0, 0), 0.0);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = scalar(2.0, true);
        p.accumulate(&Matrix::row_vector(&[0.0])).unwrap();
        Adam::new(1e-4).step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value.get(0, 0) - 2.0 * (1.0 - 0.1 * 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        for g in [3.0, -0.2] {
            let mut p = scalar(0.0, true);
            let mut opt = Adam::default();
            let mut prev = 0.0;
            for _ in 0..50 {
                p.accumulate(&Matrix::row_vector(&[g])).unwrap();
                opt.step(&mut [&mut p], 0.01).unwrap();
                let now = p.value.get(0, 0);
                assert_eq!((now - prev).signum(), -g.signum());
                prev = now;
            }
        }
    }

    #[test]
    fn step_without_backward_is_rejected() {
        let mut p = scalar(1.0, true);
        assert!(matches!(
            Adam::default().step(&mut [&mut p], 0.1),
            Err(Error::EmptyGradient)
        ));
    }
}
