//! Adam optimizer with in-place parameter updates.

use crate::error::{Error, Result};
use crate::gridmath::tensor::Tensor;

/// One registered parameter slot. Moment buffers are f64 so repeated
/// tiny updates do not lose mass to rounding.
struct Slot {
    name: String,
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Parameters update in registration order,
/// which keeps runs bit-for-bit reproducible.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, tensor: &Tensor) {
        let n = tensor.numel();
        self.slots.push(Slot {
            name: name.to_string(),
            tensor: tensor.clone(),
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
    }

    pub fn register_all(&mut self, params: &[(String, Tensor)]) {
        for (name, t) in params {
            self.register(name, t);
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters. Every registered parameter must have a gradient.
    pub fn step(&mut self) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in &mut self.slots {
            let grad = slot.tensor.grad().ok_or_else(|| {
                Error::Invariant(format!("adam: parameter '{}' has no gradient", slot.name))
            })?;
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let (ms, vs) = (&mut slot.m, &mut slot.v);
            slot.tensor.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i] as f64;
                    ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                    vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
                    let mhat = ms[i] / bc1;
                    let vhat = vs[i] / bc2;
                    data[i] = (data[i] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
                }
            });
        }
        Ok(())
    }

    /// Drop stored gradients on all registered parameters.
    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.tensor.clear_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmath::ops;
    use crate::gridmath::tensor::{Shape, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With loss = w the gradient is 1, bias correction makes the
        // first update lr * g / (|g| + eps), i.e. the learning rate.
        let w = Tensor::variable(Shape::scalar(), vec![1.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.register("w", &w);
        let loss = ops::sum(&w);
        loss.backward().unwrap();
        opt.step().unwrap();
        assert!((w.item() - 0.9).abs() < 1e-6, "got {}", w.item());
    }

    #[test]
    fn missing_gradient_is_an_error_naming_the_parameter() {
        let w = Tensor::variable(Shape::scalar(), vec![1.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.register("stem.weight", &w);
        let err = opt.step().unwrap_err();
        assert!(err.to_string().contains("stem.weight"), "{err}");
    }

    #[test]
    fn converges_on_a_quadratic() {
        let w = Tensor::variable(Shape::scalar(), vec![5.0]).unwrap();
        let target = Tensor::scalar(2.0);
        let mut opt = Adam::new(0.05);
        opt.register("w", &w);
        for _ in 0..2000 {
            opt.zero_grads();
            let loss = ops::square(&ops::sub(&w, &target).unwrap());
            loss.backward().unwrap();
            opt.step().unwrap();
        }
        assert!((w.item() - 2.0).abs() < 1e-3, "got {}", w.item());
    }

    #[test]
    fn zero_grads_clears_all_slots() {
        let w = Tensor::variable(Shape::scalar(), vec![1.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.register("w", &w);
        ops::sum(&w).backward().unwrap();
        assert!(w.grad().is_some());
        opt.zero_grads();
        assert!(w.grad().is_none());
    }
}
