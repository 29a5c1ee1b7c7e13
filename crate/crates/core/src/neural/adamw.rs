use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, ParamSet};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// AdamW with decoupled weight decay, bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(model: &Mlp, lr: f64, weight_decay: f64) -> Self {
        let n = model.n_params();
        Self {
            lr,
            weight_decay,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &ParamSet) -> Result<()> {
        if !grads.is_finite() {
            let bad = grads.iter().position(|g| !g.is_finite()).unwrap_or(0);
            return Err(Error::Training(format!(
                "non-finite gradient at parameter {bad} on optimizer step {}",
                self.step + 1
            )));
        }
        if self.m.len() != model.n_params() {
            return Err(Error::Dimension(
                "optimizer state does not match model".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (lr, wd) = (self.lr, self.weight_decay);
        let (m, v) = (&mut self.m, &mut self.v);
        model.apply_update(grads, |p, g, k| {
            *p *= 1.0 - lr * wd;
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        });
        Ok(())
    }
}
