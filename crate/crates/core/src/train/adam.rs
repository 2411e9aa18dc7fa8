//! Adam with decoupled weight decay. Moments and all update arithmetic stay
//! at 64 bits regardless of the parameter precision.

use std::collections::HashMap;

use crate::checkpoint::Snapshot;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// One bias-corrected update over every parameter of the store. The
    /// decay term -lr*wd*theta is applied outside the moment machinery.
    pub fn step_params<E: Scalar>(&mut self, store: &ParamStore<E>) -> Result<()> {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for name in store.names() {
            let t = store.get(&name).unwrap();
            let g: Vec<f64> = t
                .grad()
                .ok_or_else(|| {
                    Error::contract(format!("adam step without a gradient for {name:?}"))
                })?
                .iter()
                .map(|v| v.to_f64())
                .collect();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut theta = t.to_f64_vec();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let step = self.lr * (m[i] / bias1) / ((v[i] / bias2).sqrt() + self.eps);
                let decay = if self.weight_decay > 0.0 {
                    self.lr * self.weight_decay * theta[i]
                } else {
                    0.0
                };
                theta[i] -= step + decay;
            }
            let cast: Vec<E> = theta.iter().map(|&x| E::from_f64(x)).collect();
            t.set_data(&cast)?;
        }
        Ok(())
    }

    /// Serializes moments as `adam.m.*` / `adam.v.*` records plus the step
    /// counter, shaped like their parameters.
    pub fn add_to_snapshot<E: Scalar>(&self, snap: &mut Snapshot, store: &ParamStore<E>) {
        snap.push_scalar("state.step", self.step as f64);
        for name in store.names() {
            let t = store.get(&name).unwrap();
            let (m, v) = match self.moments.get(&name) {
                Some(mv) => mv.clone(),
                None => (vec![0.0; t.numel()], vec![0.0; t.numel()]),
            };
            snap.push(&format!("adam.m.{name}"), t.shape(), m.iter().map(|&x| x as f32).collect());
            snap.push(&format!("adam.v.{name}"), t.shape(), v.iter().map(|&x| x as f32).collect());
        }
    }

    pub fn restore_from_snapshot<E: Scalar>(
        &mut self,
        snap: &Snapshot,
        store: &ParamStore<E>,
    ) -> Result<()> {
        self.step = snap.scalar("state.step")? as u64;
        self.moments.clear();
        for name in store.names() {
            let m = snap
                .get(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::format(format!("checkpoint lacks adam.m.{name}")))?;
            let v = snap
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::format(format!("checkpoint lacks adam.v.{name}")))?;
            self.moments.insert(
                name,
                (
                    m.data.iter().map(|&x| x as f64).collect(),
                    v.data.iter().map(|&x| x as f64).collect(),
                ),
            );
        }
        Ok(())
    }
}
