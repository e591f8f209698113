use crate::error::{Error, Result};
use crate::params::{Component, ParamId, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with decoupled weight decay. Moment buffers exist only for the
/// parameters that were trainable when the state was created.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Slot>,
}

#[derive(Debug, Clone)]
struct Slot {
    id: ParamId,
    decay: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let slots = store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let p = store.get(id);
                let n = p.tensor.numel();
                Slot {
                    id,
                    // gates stay out of weight decay
                    decay: p.component != Component::Gate,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self {
            lr,
            weight_decay,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            step: 0,
            slots,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> usize {
        self.slots.len()
    }

    pub fn tracks(&self, id: ParamId) -> bool {
        self.slots.iter().any(|s| s.id == id)
    }

    /// One bias-corrected update from the gradients held in `store`.
    /// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for s in &self.slots {
            if store.get(s.id).tensor.grad().is_none() {
                return Err(Error::MissingGrad(store.get(s.id).name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for s in &mut self.slots {
            let p = store.get_mut(s.id);
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let wd = if s.decay { self.lr * self.weight_decay } else { 0.0 };
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
                s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = s.m[i] / bc1;
                let v_hat = s.v[i] / bc2;
                data[i] -= wd * data[i] + self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
