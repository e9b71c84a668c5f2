use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ParamVisitor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer pair per parameter in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar> {
    pub hyper: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(hyper: AdamConfig) -> Self {
        Self {
            hyper,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Drops moments and the step counter; hyperparameters are kept.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    /// One bias-corrected Adam update over parallel parameter and gradient buffers.
    pub fn update(&mut self, params: &mut [Vec<S>], grads: &[Vec<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam_step", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape("adam_step", format!("param {i}: {} values, {} grads", p.len(), g.len())));
            }
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in parameter {i} at {bad}")));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::shape("adam_step", "moment buffers do not match parameters"));
        }
        self.step += 1;
        let b1 = S::from_f64_lossy(self.hyper.beta1);
        let b2 = S::from_f64_lossy(self.hyper.beta2);
        let lr = S::from_f64_lossy(self.hyper.lr);
        let eps = S::from_f64_lossy(self.hyper.eps);
        let one = S::one();
        let step = self.step as i32;
        let bc1 = one - b1.powi(step);
        let bc2 = one - b2.powi(step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to every parameter of `module` using its accumulated leaf gradients,
/// replacing each parameter with a fresh leaf holding the updated values.
pub fn adam_step<S: Scalar, M: ParamVisitor<S>>(module: &mut M, state: &mut AdamState<S>) -> Result<()> {
    let mut values = Vec::new();
    let mut grads = Vec::new();
    module.visit(&mut |_, t| {
        values.push(t.to_vec());
        grads.push(t.grad_or_zero());
    });
    state.update(&mut values, &grads)?;
    let mut it = values.into_iter();
    let mut err = None;
    module.visit_mut(&mut |_, t| {
        let v = it.next().expect("same parameter order");
        match Tensor::param(t.shape().to_vec(), v) {
            Ok(fresh) => *t = fresh,
            Err(e) => err = Some(e),
        }
    });
    err.map_or(Ok(()), Err)
}
