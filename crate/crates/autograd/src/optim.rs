use std::collections::BTreeMap;

use crate::{Float, Grads, Group, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the parameters of a set of groups.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    groups: Vec<Group>,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, groups: &[Group]) -> Self {
        Self {
            config,
            groups: groups.to_vec(),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Apply one update. Gradients for parameters outside this optimizer's
    /// groups are ignored.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (id, g) in grads.iter() {
            if !self.groups.contains(&store.group(id)) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(id);
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..g.numel() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + ob1 * gi;
                vd[i] = b2 * vd[i] + ob2 * gi * gi;
                pd[i] -= step_size * md[i] / ((vd[i] * inv_bc2).sqrt() + eps);
            }
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>, &Tensor<T>)> {
        self.moments.iter().map(|(k, (m, v))| (*k, m, v))
    }

    /// Restore optimizer state saved from [`Adam::moments`].
    pub fn restore(&mut self, step: u64, moments: impl IntoIterator<Item = (ParamId, Tensor<T>, Tensor<T>)>) {
        self.step = step;
        self.moments = moments.into_iter().map(|(k, m, v)| (k, (m, v))).collect();
    }
}
