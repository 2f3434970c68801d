use std::collections::BTreeMap;

use crate::tensor::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// One bias-corrected Adam update of a single tensor; `t` is the 1-based
/// step count.
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

/// Adam moments keyed by parameter name. Parameters that do not require
/// gradients are skipped and keep their moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let t = self.t;
        for (_, name, tensor) in store.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let n = tensor.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let grad = tensor.grad().expect("trainable tensor has a gradient").to_vec();
            adam_step(tensor.values_mut(), &grad, m, v, t, lr);
        }
    }
}
