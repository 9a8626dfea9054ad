//! Adam with global-norm gradient clipping. Parameter updates are
//! functional: each step returns fresh tensors in the same order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over a parameter list, clipping the concatenated gradient
    /// to `clip` in global L2 norm first.
    pub fn apply(&mut self, params: &[Tensor], grads: &[Tensor], clip: f64) -> Result<Vec<Tensor>> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let total_sq: f64 = grads.iter().flat_map(|g| g.data()).map(|g| g * g).sum();
        let norm = total_sq.sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::Contract(format!(
                    "param {i} has {} elements, optimizer state has {}",
                    p.numel(),
                    self.m[i].len()
                )));
            }
            let mut new = Vec::with_capacity(p.numel());
            for j in 0..p.numel() {
                let gj = g.data()[j] * scale;
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gj;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                new.push(p.data()[j] - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            out.push(Tensor::new(new, p.shape())?);
        }
        Ok(out)
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state_tensors(&self, names: &[String]) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, name) in names.iter().enumerate() {
            out.push((format!("adam.m.{name}"), vec![self.m[i].len()], self.m[i].clone()));
            out.push((format!("adam.v.{name}"), vec![self.v[i].len()], self.v[i].clone()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // f(x) = x^2; gradient 2x. Adam may oscillate near the minimum, so
        // check the overall trend rather than per-step decrease.
        let mut adam = Adam::new(0.1, &[1]);
        let mut x = Tensor::scalar(3.0).unwrap();
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * x.data()[0]).unwrap();
            x = adam.apply(&[x], &[g], 1e9).unwrap().pop().unwrap();
        }
        let f = x.data()[0] * x.data()[0];
        assert!(f < 1e-2, "final value {f}");
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut a = Adam::new(0.1, &[2]);
        let mut b = Adam::new(0.1, &[2]);
        let p = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
        let huge = Tensor::new(vec![3000.0, 4000.0], &[2]).unwrap();
        let clipped = a.apply(&[p.clone()], &[huge.clone()], 1.0).unwrap();
        let scaled = Tensor::new(vec![3000.0 / 5000.0, 4000.0 / 5000.0], &[2]).unwrap();
        let manual = b.apply(&[p], &[scaled], 1e9).unwrap();
        assert!(clipped[0].bitwise_eq(&manual[0]));
    }

    #[test]
    fn zero_gradient_with_zero_moments_is_identity() {
        let mut adam = Adam::new(0.1, &[2]);
        let p = Tensor::new(vec![1.5, -2.5], &[2]).unwrap();
        let z = Tensor::zeros(&[2]);
        let out = adam.apply(&[p.clone()], &[z], 1.0).unwrap();
        assert!(out[0].bitwise_eq(&p));
    }
}
