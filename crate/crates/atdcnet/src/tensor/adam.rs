//! Adam optimizer with bias-corrected first and second moments.

use super::params::{ParamKind, ParamStore};
use super::Elem;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers aligned with store entry indices; empty for entries the
/// optimizer never touches.
pub struct AdamState<E> {
    pub step: u64,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
}

impl<E: Elem> AdamState<E> {
    pub fn for_store(store: &ParamStore<E>) -> Self {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for e in store.entries() {
            let len = if e.kind == ParamKind::Trainable { e.data.len() } else { 0 };
            m.push(vec![E::ZERO; len]);
            v.push(vec![E::ZERO; len]);
        }
        AdamState { step: 0, m, v }
    }
}

/// One update from the gradients currently held in the store.
pub fn adam_step<E: Elem>(store: &mut ParamStore<E>, state: &mut AdamState<E>, hp: AdamParams) {
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    let b1 = E::from_f64(hp.beta1);
    let b2 = E::from_f64(hp.beta2);
    let ob1 = E::from_f64(1.0 - hp.beta1);
    let ob2 = E::from_f64(1.0 - hp.beta2);
    let lr1 = E::from_f64(hp.lr / c1);
    let ic2 = E::from_f64(1.0 / c2);
    let eps = E::from_f64(hp.eps);
    for idx in 0..store.len() {
        if store.entry(idx).kind != ParamKind::Trainable {
            continue;
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let e = store.entry_mut(idx);
        for k in 0..e.data.len() {
            let g = e.grad[k];
            m[k] = b1 * m[k] + ob1 * g;
            v[k] = b2 * v[k] + ob2 * g * g;
            let vhat = v[k] * ic2;
            e.data[k] = e.data[k] - lr1 * m[k] / (vhat.sqrt() + eps);
        }
    }
}
