//! Adam with bias correction, no weight decay, no gradient clipping. The
//! learning rate for each step is `lr * factor`, with the factor supplied by
//! the caller (see [`linear_decay_factor`]).

use alloc::format;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

struct Slot {
    m: Tensor,
    v: Tensor,
}

/// Optimizer state for a fixed list of parameters. The slot order is bound
/// at construction and must match the order passed to [`AdamState::step`].
pub struct AdamState {
    hyper: AdamHyper,
    slots: Vec<Slot>,
    t: u64,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, param_shapes: &[&[usize]]) -> Result<Self> {
        if hyper.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("negative learning rate {}", hyper.lr)));
        }
        let slots = param_shapes
            .iter()
            .map(|s| Slot { m: Tensor::zeros(s), v: Tensor::zeros(s) })
            .collect();
        Ok(Self { hyper, slots, t: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. `schedule_factor` multiplies the base
    /// learning rate; the step counter advances by exactly one.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        schedule_factor: f32,
    ) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "{} params / {} grads against {} slots",
                    params.len(),
                    grads.len(),
                    self.slots.len()
                ),
            });
        }
        for ((p, g), slot) in params.iter().zip(grads.iter()).zip(&self.slots) {
            if p.shape() != g.shape() || p.shape() != slot.m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.t += 1;
        let h = self.hyper;
        let step_lr = h.lr * schedule_factor;
        let bc1 = 1.0 - libm::powf(h.beta1, self.t as f32);
        let bc2 = 1.0 - libm::powf(h.beta2, self.t as f32);
        for ((p, g), slot) in params.iter_mut().zip(grads.iter()).zip(self.slots.iter_mut()) {
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            let pd = p.data_mut();
            for ((mv, vv), (pv, &gv)) in
                m.iter_mut().zip(v.iter_mut()).zip(pd.iter_mut().zip(g.data()))
            {
                *mv = h.beta1 * *mv + (1.0 - h.beta1) * gv;
                *vv = h.beta2 * *vv + (1.0 - h.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= step_lr * m_hat / (libm::sqrtf(v_hat) + h.eps);
            }
        }
        Ok(())
    }
}

/// Linear decay to zero: factor for the t-th step (1-based) out of `total`.
/// The first step runs at `1 - 1/total` of the base rate and the last at 0.
pub fn linear_decay_factor(step_1based: u64, total: u64) -> f32 {
    debug_assert!(step_1based >= 1 && step_1based <= total);
    1.0 - step_1based as f32 / total as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new(AdamHyper::with_lr(0.1), &[&[2]]).unwrap();
        state.step(&mut [&mut p], &[&g], 1.0).unwrap();
        assert_eq!(p.data(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m=0.1, v=0.001, bias-corrected to 1 and 1: step = lr / (1 + eps).
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let hyper = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut state = AdamState::new(hyper, &[&[1]]).unwrap();
        state.step(&mut [&mut p], &[&g], 1.0).unwrap();
        assert_eq!(state.step_count(), 1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6, "got {}", p.data()[0]);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![-2.0]).unwrap();
        let mut state = AdamState::new(AdamHyper::with_lr(0.05), &[&[1]]).unwrap();
        let mut prev = 0.0;
        for _ in 0..2 {
            state.step(&mut [&mut p], &[&g], 1.0).unwrap();
            assert!(p.data()[0] > prev, "must move opposite the gradient sign");
            prev = p.data()[0];
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::new(AdamHyper::default(), &[&[2]]).unwrap();
        assert!(state.step(&mut [&mut p], &[&g], 1.0).is_err());
    }

    #[test]
    fn decay_reaches_zero_on_last_step() {
        assert_eq!(linear_decay_factor(40, 40), 0.0);
        assert!(linear_decay_factor(1, 40) > 0.97);
    }
}
