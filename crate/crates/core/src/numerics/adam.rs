use serde::{Deserialize, Serialize};

use super::{NumericsError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier applied at every `decay_epoch` boundary.
    pub decay_factor: f64,
    /// Epochs between decays; `0` disables decay.
    pub decay_epoch: usize,
}

impl AdamHyper {
    /// Settings used for the single-pose GAN: lr 1e-3, β = (0.5, 0.9), halved every 30 epochs.
    pub fn pose_gan() -> Self {
        Self { lr: 1e-3, beta1: 0.5, beta2: 0.9, eps: 1e-8, decay_factor: 0.5, decay_epoch: 30 }
    }

    /// Same schedule as [`pose_gan`](Self::pose_gan) with lr 5e-5.
    pub fn sequence_gan() -> Self {
        Self { lr: 5e-5, ..Self::pose_gan() }
    }

    /// lr 1e-3, β₁ 0.9, no decay.
    pub fn skeleton_to_image() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay_factor: 1.0, decay_epoch: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
    epoch: usize,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, params: &[&Tensor]) -> Self {
        Self {
            hyper,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
            epoch: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// Tell the optimizer which epoch the following steps belong to.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn learning_rate(&self) -> f64 {
        let h = &self.hyper;
        match self.epoch.checked_div(h.decay_epoch) {
            None => h.lr,
            Some(k) => h.lr * h.decay_factor.powi(k as i32),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.first_moment.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam",
                    detail: format!("param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), m.shape()),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFinite { op: "adam" });
            }
        }
        self.step_count += 1;
        let h = self.hyper;
        let lr = self.learning_rate();
        let bc1 = 1.0 - h.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step_count as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}
