use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::numcore::Gradients;

/// AdamW with decoupled weight decay applied to `*.weight` tensors only.
/// Parameters without a gradient are skipped entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment buffers plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn step(&self, params: &mut ParamSet, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            // Parameters outside the loss graph (an unused head) stay put.
            let Some(g) = grads.get(name) else {
                continue;
            };
            if g.dims() != p.dims() {
                return Err(Error::shape(name.clone(), "gradient shape differs from parameter"));
            }
            let m = state.m.get_mut(name).expect("moments match params");
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = state.v.get_mut(name).expect("moments match params");
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            let m = state.m.get(name).unwrap().data();
            let v = state.v.get(name).unwrap().data();
            for ((x, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *x -= lr * (update + wd * *x);
            }
        }
        Ok(())
    }
}
