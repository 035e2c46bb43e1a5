//! First-order optimizers over a [`ParamSet`].
//!
//! Both optimizers walk parameters in insertion order, keep per-coordinate
//! state sized at construction, and refuse to apply non-finite gradients
//! (naming the offending parameter instead of corrupting it).

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Real;

fn state_like<S: Real>(params: &ParamSet<S>) -> Vec<Vec<S>> {
    params.iter().map(|p| vec![S::zero(); p.data.len()]).collect()
}

fn check_finite<S: Real>(params: &ParamSet<S>) -> Result<()> {
    for p in params.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam<S: Real> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(lr: S, params: &ParamSet<S>) -> Self {
        Adam {
            lr,
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
            step: 0,
            m: state_like(params),
            v: state_like(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the accumulated gradients (which are left in
    /// place; call [`ParamSet::zero_grads`] before the next pass).
    pub fn step(&mut self, params: &mut ParamSet<S>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::InvalidArg(
                "optimizer built for a different parameter set".into(),
            ));
        }
        check_finite(params)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            for j in 0..p.data.len() {
                let g = p.grad[j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (S::one() - self.beta1) * g;
                *v = self.beta2 * *v + (S::one() - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// RMSProp with the epsilon inside the square root:
/// `v <- decay*v + (1-decay)*g^2 ; p <- p - lr*g/sqrt(v + eps)`.
#[derive(Debug)]
pub struct RmsProp<S: Real> {
    pub lr: S,
    pub decay: S,
    pub eps: S,
    step: u64,
    v: Vec<Vec<S>>,
}

impl<S: Real> RmsProp<S> {
    pub fn new(lr: S, params: &ParamSet<S>) -> Self {
        RmsProp {
            lr,
            decay: S::of(0.99),
            eps: S::of(1e-8),
            step: 0,
            v: state_like(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<S>) -> Result<()> {
        if self.v.len() != params.len() {
            return Err(Error::InvalidArg(
                "optimizer built for a different parameter set".into(),
            ));
        }
        check_finite(params)?;
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            for j in 0..p.data.len() {
                let g = p.grad[j];
                let v = &mut self.v[i][j];
                *v = self.decay * *v + (S::one() - self.decay) * g * g;
                p.data[j] -= self.lr * g / (*v + self.eps).sqrt();
            }
        }
        Ok(())
    }
}
