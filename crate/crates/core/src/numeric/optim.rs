//! Trainable parameters and the Adam update.

use super::{NumericError, Tensor};

/// A trainable tensor together with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            step: 0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&Tensor, &Tensor) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Applies one bias-corrected update to every parameter and zeroes the
    /// gradients. Nothing is modified if any gradient is non-finite.
    pub fn step<'p>(&self, params: impl IntoIterator<Item = &'p mut Parameter>) -> Result<(), NumericError> {
        let mut params: Vec<&mut Parameter> = params.into_iter().collect();
        if let Some(index) = params.iter().position(|p| !p.grad.is_finite()) {
            return Err(NumericError::NonFiniteGradient { index });
        }
        for p in params.iter_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let Parameter {
                value,
                grad,
                first_moment,
                second_moment,
                ..
            } = &mut **p;
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(first_moment.data_mut())
                .zip(second_moment.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * *g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * *g * *g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *g = 0.0;
            }
        }
        Ok(())
    }
}
