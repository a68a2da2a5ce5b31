//! AdamW with decoupled weight decay.
//!
//! State slots are created once for a fixed list of parameter sizes and must
//! be fed the same parameters in the same order on every step; the weight
//! decay term multiplies the parameter directly instead of being folded into
//! the gradient.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, sizes: &[usize]) -> Result<Self> {
        if lr < 0.0 || weight_decay < 0.0 {
            return Err(Error::input(
                "adamw: lr and weight_decay must be non-negative",
            ));
        }
        Ok(AdamW {
            lr,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }

    /// One update over all slots. `params_and_grads[i]` must have the size
    /// slot `i` was created with.
    pub fn step(&mut self, params_and_grads: &mut [(&mut [f64], &[f64])]) -> Result<()> {
        if params_and_grads.len() != self.m.len() {
            return Err(Error::input(format!(
                "adamw: got {} parameter slots, optimizer tracks {}",
                params_and_grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (slot, (param, grad)) in params_and_grads.iter_mut().enumerate() {
            if param.len() != self.m[slot].len() || grad.len() != param.len() {
                return Err(Error::input(format!(
                    "adamw: slot {slot} size mismatch (param {}, grad {}, state {})",
                    param.len(),
                    grad.len(),
                    self.m[slot].len()
                )));
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..param.len() {
                let g = grad[i];
                if !g.is_finite() {
                    return Err(Error::numeric(format!(
                        "adamw: non-finite gradient {g} in slot {slot} entry {i}"
                    )));
                }
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= self.lr * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * param[i]);
                if !param[i].is_finite() {
                    return Err(Error::numeric(format!(
                        "adamw: parameter became non-finite in slot {slot} entry {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}
