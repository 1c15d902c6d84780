//! Adam with L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    scale: Vec<f64>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(shapes: &[&Tensor], learning_rate: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            scale: vec![1.0; shapes.len()],
            first: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Multiplies the learning rate of one parameter tensor by `factor`.
    pub fn set_lr_scale(&mut self, param: usize, factor: f64) {
        self.scale[param] = factor;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.first[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.second[param]
    }

    /// One bias-corrected update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            if g.len() != p.len() || self.first[i].len() != p.len() {
                return Err(Error::dim("adam", &[p.len()], &[g.len()]));
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let lr = self.learning_rate * self.scale[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] + self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
