//! Momentum SGD for network weights and Adam for architecture logits.

use serde::{Deserialize, Serialize};

use crate::arch::ArchParams;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: store.zeros_like() }
    }

    /// Momentum buffers laid out like `store`, for checkpointing.
    pub fn velocity_store(&self, store: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (i, id) in store.ids().enumerate() {
            let shape = store.get(id).shape().to_vec();
            out.insert(store.name(id), Tensor::new(shape, self.velocity[i].clone())?)?;
        }
        Ok(out)
    }

    pub fn load_velocity(&mut self, v: &ParamStore) -> Result<()> {
        if v.len() != self.velocity.len() {
            return Err(Error::Shape("momentum checkpoint does not match the parameters".into()));
        }
        for (i, id) in v.ids().enumerate() {
            if v.get(id).len() != self.velocity[i].len() {
                return Err(Error::Shape(format!("momentum `{}` has the wrong size", v.name(id))));
            }
            self.velocity[i] = v.get(id).data().to_vec();
        }
        Ok(())
    }

    /// `v ← μv + (g + λw)`, `w ← w − lr·v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Shape("gradient layout does not match the parameter store".into()));
        }
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let w = store.get_mut(id).data_mut();
            for ((wv, vv), gv) in w.iter_mut().zip(&mut self.velocity[i]).zip(&grads[i]) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *wv;
                *wv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: &ArchParams, lr: f64) -> Self {
        let n = flatten(params).len();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Entries with a zero gradient history stay exactly where they are.
    pub fn step(&mut self, params: &mut ArchParams, grads: &ArchParams) -> Result<()> {
        let g = flatten(grads);
        let mut p = flatten(params);
        if g.len() != self.m.len() || p.len() != g.len() {
            return Err(Error::Shape("architecture gradient layout mismatch".into()));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        unflatten(params, &p);
        Ok(())
    }
}

fn flatten(p: &ArchParams) -> Vec<f64> {
    let mut v = Vec::new();
    for a in &p.alpha {
        v.extend_from_slice(a);
    }
    for b in &p.beta {
        v.extend_from_slice(b);
    }
    for g in &p.gamma {
        v.extend_from_slice(g);
    }
    v
}

fn unflatten(p: &mut ArchParams, flat: &[f64]) {
    let mut k = 0;
    for a in &mut p.alpha {
        for x in a.iter_mut() {
            *x = flat[k];
            k += 1;
        }
    }
    for b in &mut p.beta {
        for x in b.iter_mut() {
            *x = flat[k];
            k += 1;
        }
    }
    for g in &mut p.gamma {
        for x in g.iter_mut() {
            *x = flat[k];
            k += 1;
        }
    }
}
