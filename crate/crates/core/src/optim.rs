//! Plain SGD and Adam parameter updates.

use crate::error::{Error, Result};

/// Parameter storage types an optimizer can update in place.
pub trait Param: Copy {
    fn get(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Param for f32 {
    #[inline]
    fn get(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Param for f64 {
    #[inline]
    fn get(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn check_len(params: usize, grads: usize) -> Result<()> {
    if params != grads {
        return Err(Error::ShapeMismatch {
            expected: params,
            actual: grads,
        });
    }
    Ok(())
}

/// `p <- p - lr * g`, no momentum.
pub fn sgd_step<T: Param>(params: &mut [T], grads: &[f64], lr: f64) -> Result<()> {
    check_len(params.len(), grads.len())?;
    for (p, g) in params.iter_mut().zip(grads) {
        if *g != 0.0 {
            *p = T::from_f64(p.get() - lr * g);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update.
    pub fn step<T: Param>(&mut self, params: &mut [T], grads: &[f64]) -> Result<()> {
        check_len(params.len(), grads.len())?;
        check_len(self.m.len(), grads.len())?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.m[i] == 0.0 {
                continue;
            }
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = T::from_f64(params[i].get() - self.lr * m_hat / (v_hat.sqrt() + self.eps));
        }
        Ok(())
    }
}

/// Learning rates for the three parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// SGD on the factor planes or vectors.
    pub field: f64,
    /// SGD on the decoder network.
    pub decoder: f64,
    /// Adam on learnable poses.
    pub pose: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            field: 0.5,
            decoder: 0.001,
            pose: 0.001,
        }
    }
}
