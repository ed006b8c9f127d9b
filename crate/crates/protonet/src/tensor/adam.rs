//! Adam optimizer with bias correction and optional decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter first/second moment estimates plus a global step counter.
/// Moment buffers are allocated on the first step and shape-checked after.
pub struct AdamState {
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One Adam update over a flat parameter list. Weight decay is decoupled
    /// L2 shrinkage: param ← param − lr·wd·param, applied with the step.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(
                "adam_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::contract(
                "adam_step",
                "parameter count changed between steps",
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.numel() {
                return Err(Error::contract(
                    "adam_step",
                    format!(
                        "shape mismatch at param {i}: {:?} vs {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.epsilon)
                    + weight_decay * *pv;
                *pv -= lr * update;
            }
        }
        Ok(())
    }
}
