//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::models::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

impl AdamW {
    pub fn step(&self, params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter array");
        if state.m.is_empty() {
            state.m = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            state.v = state.m.clone();
        }
        state.step += 1;
        let bc1 = 1.0 - self.beta1.powi(state.step as i32);
        let bc2 = 1.0 - self.beta2.powi(state.step as i32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv -= self.lr * (update + self.weight_decay * *pv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let opt = AdamW { lr: 0.1, weight_decay: 0.0, ..AdamW::default() };
        let mut st = AdamState::default();
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut p, &[g], &mut st);
        let d = p.tensors()[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![1], vec![5.0]).unwrap());
        let opt = AdamW { lr: 0.05, weight_decay: 0.0, ..AdamW::default() };
        let mut st = AdamState::default();
        for _ in 0..2000 {
            let w = p.tensors()[0].data()[0];
            opt.step(&mut p, &[Tensor::scalar(2.0 * (w - 1.0))], &mut st);
        }
        assert!((p.tensors()[0].data()[0] - 1.0).abs() < 1e-2);
    }
}
