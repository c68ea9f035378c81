//! Named trainable parameters and the AdamW update.

use std::rc::Rc;

use super::{RngStream, Tensor};
use crate::error::{Error, Result};

/// A traced tensor with a name and persistent optimizer state.
///
/// The trace node (and with it the gradient slot) survives value updates, so
/// forward passes always accumulate into the same slot while the optimizer
/// rewrites values in place.
pub struct Parameter {
    name: String,
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Parameter> {
        let tensor = Tensor::leaf(rows, cols, data)?;
        let n = tensor.len();
        Ok(Parameter { name: name.into(), tensor, m: vec![0.0; n], v: vec![0.0; n], step: 0 })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Parameter {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Parameter::new(name, rows, cols, data).expect("positive dims")
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Parameter {
        Parameter::new(name, rows, cols, vec![0.0; rows * cols]).expect("positive dims")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Traced handle for forward passes; gradients flow back to this
    /// parameter.
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Untraced handle sharing the same values. Forward passes through a
    /// frozen view never touch this parameter's gradient.
    pub fn frozen(&self) -> Tensor {
        self.tensor.detach()
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.values()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tensor.shape()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.tensor.grad().expect("parameter tensors are always traced")
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn optimizer_state(&self) -> (&[f64], &[f64], u64) {
        (&self.m, &self.v, self.step)
    }

    /// Overwrites values in place; old backward graphs keep the snapshot
    /// they saved.
    pub fn set_values(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.tensor.len() {
            return Err(Error::Shape(format!(
                "parameter {}: {} values for {} slots",
                self.name,
                data.len(),
                self.tensor.len()
            )));
        }
        Rc::make_mut(self.tensor.data_rc_mut()).copy_from_slice(data);
        Ok(())
    }

    pub fn set_optimizer_state(&mut self, m: &[f64], v: &[f64], step: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Shape(format!("optimizer state size mismatch for {}", self.name)));
        }
        self.m.copy_from_slice(m);
        self.v.copy_from_slice(v);
        self.step = step;
        Ok(())
    }

    /// Multiplies the current gradient in place (global-norm clipping).
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(g) = self.tensor.grad() {
            let scaled: Vec<f64> = g.iter().map(|x| x * factor).collect();
            self.tensor.zero_grad();
            if let Some(node) = &self.tensor.node {
                node.accumulate(&scaled);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> AdamW {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn with_weight_decay(lr: f64, weight_decay: f64) -> AdamW {
        AdamW { weight_decay, ..AdamW::new(lr) }
    }

    /// One update. The gradient is read but not reset; the caller zeroes
    /// grads when the accumulation window ends.
    pub fn step(&self, p: &mut Parameter) -> Result<()> {
        let grad = p
            .tensor
            .grad()
            .ok_or_else(|| Error::State(format!("parameter {} has no gradient slot", p.name)))?;
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let values = Rc::make_mut(p.tensor.data_rc_mut());
        for i in 0..values.len() {
            let g = grad[i];
            p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
            p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            values[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * values[i]);
        }
        Ok(())
    }
}

/// L2 norm over all gradients of a parameter set.
pub fn global_grad_norm(params: &[&Parameter]) -> f64 {
    let mut sq = 0.0;
    for p in params {
        for g in p.grad() {
            sq += g * g;
        }
    }
    sq.sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut [&mut Parameter], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in params.iter() {
        for g in p.grad() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for p in params.iter_mut() {
            p.scale_grad(factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn zero_grad_zero_decay_leaves_parameter_unchanged() {
        let mut p = Parameter::new("w", 1, 2, vec![1.0, -2.0]).unwrap();
        let loss = p.tensor().scale(0.0).sum_all();
        backward(&loss).unwrap();
        AdamW::new(0.1).step(&mut p).unwrap();
        assert_eq!(p.values(), &[1.0, -2.0]);
        assert_eq!(p.step_count(), 1);
    }

    #[test]
    fn missing_grad_is_a_state_error_naming_the_parameter() {
        // A parameter that never participated in a backward pass has an
        // empty slot only if we bypass the tensor; grad() defaults to zeros,
        // so simulate the error path via an untraced tensor swap.
        let mut p = Parameter::new("theta.w1", 1, 1, vec![0.0]).unwrap();
        p.tensor = p.tensor.detach();
        let err = AdamW::new(0.1).step(&mut p).unwrap_err().to_string();
        assert!(err.contains("theta.w1"), "{err}");
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = (w - 3)^2, analytic grad 2(w - 3)
        let mut p = Parameter::new("w", 1, 1, vec![0.0]).unwrap();
        let opt = AdamW::new(0.1);
        for _ in 0..200 {
            let shifted = p.tensor().add(&Tensor::scalar(-3.0)).unwrap();
            let sq = shifted.matmul(&shifted).unwrap(); // 1x1 * 1x1
            backward(&sq).unwrap();
            opt.step(&mut p).unwrap();
            p.zero_grad();
        }
        assert!((p.values()[0] - 3.0).abs() < 1e-2, "w = {}", p.values()[0]);
    }

    #[test]
    fn weight_decay_shrinks_geometrically() {
        let mut p = Parameter::new("w", 1, 1, vec![8.0]).unwrap();
        let opt = AdamW::with_weight_decay(0.1, 0.5);
        let mut expect = 8.0;
        for _ in 0..5 {
            let loss = p.tensor().scale(0.0).sum_all();
            backward(&loss).unwrap();
            opt.step(&mut p).unwrap();
            p.zero_grad();
            expect *= 1.0 - 0.1 * 0.5;
            assert!((p.values()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut p = Parameter::new("w", 1, 2, vec![0.0, 0.0]).unwrap();
        let loss = p.tensor().scale(3.0).sum_all();
        backward(&loss).unwrap(); // grad = [3, 3], norm 3*sqrt(2)
        let pre = clip_global_norm(&mut [&mut p], 1.0);
        assert!((pre - 3.0 * 2.0f64.sqrt()).abs() < 1e-12);
        let g = p.grad();
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
