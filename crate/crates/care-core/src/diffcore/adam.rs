//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::diffcore::matrix::Matrix;
use crate::diffcore::params::ParamStore;
use crate::error::{CareError, Result};

/// Optimizer hyperparameters. The moment decay rates and epsilon default to
/// the standard 0.9 / 0.999 / 1e-8.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// Standard moment settings with the given learning rate.
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    /// Fresh state (zero moments) matching the store's parameter shapes.
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let m = params
            .shapes()
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` must match the shape of parameter `i`;
    /// the step counter increments once per call.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(CareError::contract(
                "AdamState::step",
                format!(
                    "{} gradients supplied for {} parameters",
                    grads.len(),
                    params.len()
                ),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, p) in params.mats_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(CareError::Shape {
                    op: "adam_step",
                    lhs_rows: p.rows(),
                    lhs_cols: p.cols(),
                    rhs_rows: g.rows(),
                    rhs_cols: g.cols(),
                });
            }
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let pv = p.as_mut_slice();
            for ((pe, (me, ve)), &ge) in pv
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.as_slice())
            {
                *me = self.cfg.beta1 * *me + (1.0 - self.cfg.beta1) * ge;
                *ve = self.cfg.beta2 * *ve + (1.0 - self.cfg.beta2) * ge * ge;
                let m_hat = *me / bc1;
                let v_hat = *ve / bc2;
                *pe -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
        Ok(())
    }
}
