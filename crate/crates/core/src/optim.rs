//! Warmup/inverse-square-root learning rate, Adam, and gradient clipping.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("learning-rate schedule is defined from step 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup_steps must be at least 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// First and second moment estimates, one buffer per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    /// Checks the buffers line up with `store`.
    pub fn check(&self, store: &ParamStore) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store.iter().all(|(id, p)| self.m[id.index()].len() == p.value.numel() && self.v[id.index()].len() == p.value.numel());
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("optimizer state does not match the model parameters".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, state: AdamState::new(store) }
    }

    /// One update. Parameters absent from `grads` are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let m = &mut self.state.m[id.index()];
            let v = &mut self.state.v[id.index()];
            let p = store.value_mut(*id).data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = lr * (m[i] as f64 / c1) / ((v[i] as f64 / c2).sqrt() + self.eps);
                p[i] = (p[i] - step) as f32 as f64;
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
