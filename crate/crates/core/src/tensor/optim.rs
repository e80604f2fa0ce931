//! Named trainable parameters and the Adam update rule.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{Element, Result, Tensor, TensorError};

struct ParamInner<E: Element> {
    name: String,
    tensor: Tensor<E>,
    m: RefCell<Vec<E>>,
    v: RefCell<Vec<E>>,
    step: Cell<u64>,
}

/// A leaf tensor with a unique name and Adam moment buffers. Handles are
/// cheap clones sharing the same storage.
pub struct Parameter<E: Element>(Rc<ParamInner<E>>);

impl<E: Element> Clone for Parameter<E> {
    fn clone(&self) -> Self {
        Parameter(Rc::clone(&self.0))
    }
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, data: Vec<E>, shape: &[usize]) -> Self {
        let n = data.len();
        Parameter(Rc::new(ParamInner {
            name: name.into(),
            tensor: Tensor::variable(data, shape),
            m: RefCell::new(vec![E::zero(); n]),
            v: RefCell::new(vec![E::zero(); n]),
            step: Cell::new(0),
        }))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    /// The underlying tensor; use it directly in forward computations so the
    /// graph reaches this parameter.
    pub fn tensor(&self) -> &Tensor<E> {
        &self.0.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.0.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.tensor.numel()
    }

    pub fn step_count(&self) -> u64 {
        self.0.step.get()
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.tensor.grad()
    }

    pub fn adam_state(&self) -> (Vec<E>, Vec<E>, u64) {
        (
            self.0.m.borrow().clone(),
            self.0.v.borrow().clone(),
            self.0.step.get(),
        )
    }

    pub fn set_adam_state(&self, m: &[E], v: &[E], step: u64) {
        self.0.m.borrow_mut().copy_from_slice(m);
        self.0.v.borrow_mut().copy_from_slice(v);
        self.0.step.set(step);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Reset every parameter gradient to zeros, so a parameter left untouched by
/// backward still reports a (zero) gradient.
pub fn zero_grad<E: Element>(params: &[Parameter<E>]) {
    for p in params {
        p.tensor().set_grad_zero();
    }
}

/// One Adam step with bias correction. Gradients are left untouched; the
/// caller resets them before the next backward pass.
pub fn adam_step<E: Element>(params: &[Parameter<E>], cfg: &AdamConfig) -> Result<()> {
    assert!(cfg.lr > 0.0, "adam lr must be positive");
    for p in params {
        let grad = p
            .grad()
            .ok_or_else(|| TensorError::MissingGrad(p.name().to_string()))?;
        let t = p.0.step.get() + 1;
        p.0.step.set(t);
        let b1 = E::from_f64(cfg.beta1);
        let b2 = E::from_f64(cfg.beta2);
        let one = E::one();
        let bc1 = E::from_f64(1.0 - cfg.beta1.powi(t as i32));
        let bc2 = E::from_f64(1.0 - cfg.beta2.powi(t as i32));
        let lr = E::from_f64(cfg.lr);
        let eps = E::from_f64(cfg.eps);
        let mut m = p.0.m.borrow_mut();
        let mut v = p.0.v.borrow_mut();
        let mut data = p.0.tensor.inner_data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    pub(crate) fn inner_data_mut(&self) -> std::cell::RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        // f(w) = w^2 from w = 1, lr = 0.1: |w| < 1e-3 after 200 steps.
        let p = Parameter::new("w", vec![1.0f64], &[1]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        for _ in 0..200 {
            zero_grad(&[p.clone()]);
            let loss = p.tensor().mul(p.tensor()).unwrap().sum();
            loss.backward().unwrap();
            adam_step(&[p.clone()], &cfg).unwrap();
        }
        let w = p.tensor().item();
        assert!(w.abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let p = Parameter::new("w", vec![0.7f64], &[1]);
        p.tensor().set_grad_zero();
        adam_step(&[p.clone()], &AdamConfig::default()).unwrap();
        assert_eq!(p.tensor().item(), 0.7);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // Bias-corrected first step is lr * sign(g) regardless of |g|.
        for &g0 in &[1e-6f64, 1.0, 1e6] {
            let p = Parameter::new("w", vec![0.0f64], &[1]);
            p.tensor().set_grad_zero();
            p.tensor().accumulate_grad(&[g0]);
            let cfg = AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            };
            adam_step(&[p.clone()], &cfg).unwrap();
            let w = p.tensor().item();
            assert!(
                (w + 0.01).abs() < 1e-5,
                "g0 = {g0}: first step {w} not close to -lr"
            );
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let p = Parameter::new("encoder.stage0.weight", vec![0.0f64], &[1]);
        let err = adam_step(&[p], &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("encoder.stage0.weight"));
    }

    #[test]
    fn step_count_increments() {
        let p = Parameter::new("w", vec![1.0f64], &[1]);
        for expect in 1..=3u64 {
            p.tensor().set_grad_zero();
            adam_step(&[p.clone()], &AdamConfig::default()).unwrap();
            assert_eq!(p.step_count(), expect);
        }
    }
}
