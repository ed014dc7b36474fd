use std::f64::consts::PI;

use crate::numcore::{ParamStore, Tensor};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Learning-rate multiplier at `step` of `total`: half-cosine from 1 to 0, or constant.
pub fn lr_scale(step: usize, total: usize, cosine: bool) -> f64 {
    if !cosine || total == 0 {
        return 1.0;
    }
    0.5 * (1.0 + (PI * step.min(total) as f64 / total as f64).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update. `lr[i]` and `decay[i]` are per parameter, in store order;
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: &[f64], decay: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if lr[i] == 0.0 {
                continue;
            }
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g.data()[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g.data()[j] * g.data()[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr[i] * (wd * p[j] + mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}
