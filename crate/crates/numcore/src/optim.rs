use crate::{Error, ParamStore, Result};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for every parameter in a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        AdamState { v: m.clone(), m, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of every trainable parameter, followed by
/// clearing all gradients. Frozen parameters are left untouched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: AdamConfig) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument("optimizer state does not match the parameter store".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let i = id.index();
        let grad = store.grad(id).to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let value = store.value_mut(id).data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            value[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("adam update of {}", store.name(id))));
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        store.grad_mut(id).iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(())
}

/// Linear decay from `lr0` at step 0 to zero at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::InvalidArgument(format!("step {step} outside schedule of {total_steps}")));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64))
}
