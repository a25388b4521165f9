//! AdamW with decoupled weight decay and the warmup/linear-decay schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn from_state(config: AdamWConfig, step: u64, state: BTreeMap<String, Moments<T>>) -> Self {
        AdamW { config, step, state }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    /// One update of every trainable parameter from the gradients held in
    /// `store`. A parameter without a gradient is treated as zero-gradient.
    /// Non-finite gradients abort the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (name, p) in store.iter() {
            if store.is_frozen(name) {
                continue;
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (lr_t, eps, wd) = (T::lit(lr), T::lit(c.eps), T::lit(c.weight_decay));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let frozen: Vec<bool> = store.names().map(|n| store.is_frozen(n)).collect();
        for ((name, p), frozen) in store.iter_mut().zip(frozen) {
            if frozen {
                continue;
            }
            let n = p.numel();
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            if st.m.len() != n {
                return Err(Error::shape("adamw", format!("{} moments", st.m.len()), n));
            }
            let g: Vec<T> = p.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); n]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * gi;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                *w -= lr_t * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 at step 0 to `base` at `warmup`, then linear decay to
/// 0 at `total`. Steps at or past `total` get 0.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, base: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base * (step as f64 / warmup as f64);
    }
    let span = (total - warmup).max(1) as f64;
    base * ((total - step) as f64 / span)
}
