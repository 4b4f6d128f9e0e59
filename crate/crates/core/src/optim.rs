use serde::{Deserialize, Serialize};

use crate::network::{CountingModel, ParamGroup};
use crate::scalar::Scalar;

/// Adaptive-moment optimizer with one learning rate for the encoder and
/// decoder and another for the domain head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr_encoder_decoder: f64,
    pub lr_domain_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr_encoder_decoder: f64, lr_domain_head: f64) -> Self {
        Self {
            lr_encoder_decoder,
            lr_domain_head,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::EncoderDecoder => self.lr_encoder_decoder,
            ParamGroup::DomainHead => self.lr_domain_head,
        }
    }

    /// Applies one update from the gradients accumulated in `model`.
    pub fn step(&mut self, model: &mut CountingModel<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let eps = T::of(self.eps);
        let (lr_ed, lr_head) = (T::of(self.lr_encoder_decoder), T::of(self.lr_domain_head));
        let mut slot = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params_mut(&mut |role, p| {
            if first.len() <= slot {
                first.push(vec![T::zero(); p.len()]);
                second.push(vec![T::zero(); p.len()]);
            }
            let lr = match role.group() {
                ParamGroup::EncoderDecoder => lr_ed,
                ParamGroup::DomainHead => lr_head,
            };
            let (m, v) = (&mut first[slot], &mut second[slot]);
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.value[i] = p.value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            slot += 1;
        });
    }
}
