//! AdamW with decoupled weight decay.
//!
//! ```text
//! w <- w - lr * wd * w
//! m <- b1 * m + (1 - b1) * g
//! v <- b2 * v + (1 - b2) * g^2
//! w <- w - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```
//!
//! `t` counts the steps a parameter has actually been trained, so moments
//! and bias correction restart together when a frozen group is unfrozen.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nncore::{Gradients, GroupName, ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWHyper {
    pub lr0: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self { lr0: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: AdamWHyper,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl OptimState {
    pub fn new(hyper: AdamWHyper) -> Self {
        Self { hyper, step: 0, moments: BTreeMap::new() }
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f32]> {
        self.moments.get(&id).map(|m| m.m.as_slice())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f32]> {
        self.moments.get(&id).map(|m| m.v.as_slice())
    }

    /// Drop the moments of every parameter in `group`.
    pub fn reset_group(&mut self, group: GroupName) {
        self.moments.retain(|id, _| id.group != group);
    }
}

/// One AdamW update of every trainable parameter; frozen groups are untouched.
pub fn adamw_step(params: &mut ParamSet, grads: &Gradients, state: &mut OptimState, lr: f32) -> Result<()> {
    let trainable: Vec<ParamId> = params.ids().filter(|&id| params.is_trainable(id)).collect();
    for &id in &trainable {
        let p = params.get(id);
        match grads.get(id) {
            None => return Err(Error::MissingGradient(p.name.clone())),
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::shape(
                    "adamw_step",
                    format!("gradient {:?} vs parameter `{}` {:?}", g.shape(), p.name, p.value.shape()),
                ))
            }
            Some(_) => {}
        }
    }

    let h = state.hyper.clone();
    for id in trainable {
        let g = grads.get(id).expect("checked above").data();
        let w = params.get_mut(id).value.data_mut();
        let slot = state.moments.entry(id).or_insert_with(|| Moments {
            m: vec![0.0; w.len()],
            v: vec![0.0; w.len()],
            t: 0,
        });
        slot.t += 1;
        let bc1 = (1.0 - (h.beta1 as f64).powi(slot.t as i32)) as f32;
        let bc2 = (1.0 - (h.beta2 as f64).powi(slot.t as i32)) as f32;
        let decay = lr * h.weight_decay;
        for i in 0..w.len() {
            w[i] -= decay * w[i];
            let gi = g[i];
            slot.m[i] = h.beta1 * slot.m[i] + (1.0 - h.beta1) * gi;
            slot.v[i] = h.beta2 * slot.v[i] + (1.0 - h.beta2) * gi * gi;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    state.step += 1;
    Ok(())
}
